//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tl_core::nn::{one_hot, Activation, LayerSpec, LossKind, MlpModel};
use tl_core::Matrix;

const HIDDEN: [Activation; 5] = [
    Activation::Relu,
    Activation::Sigmoid,
    Activation::Tanh,
    Activation::Elu,
    Activation::Identity,
];

/// One seeded (model, batch, labels, loss) instance within desk-scale bounds:
/// ≤ 4 layers, widths ≤ 16, batch ≤ 8.
pub fn gradient_instance(seed: u64) -> (MlpModel, Matrix, Matrix, LossKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed);
    let depth = 1 + (seed as usize % 4);
    let kind = if seed.is_multiple_of(2) { LossKind::CrossEntropy } else { LossKind::Mse };
    let output = match kind {
        LossKind::CrossEntropy => [Activation::Softmax, Activation::Sigmoid][(seed as usize / 2) % 2],
        LossKind::Mse => Activation::ALL[(seed as usize / 2) % 6],
    };
    let mut widths = vec![rng.random_range(1..=16)];
    for _ in 0..depth {
        widths.push(rng.random_range(2..=16));
    }
    let spec: Vec<LayerSpec> = (0..depth)
        .map(|l| {
            let act = if l + 1 == depth { output } else { HIDDEN[(seed as usize + l) % 5] };
            LayerSpec::new(widths[l], widths[l + 1], act)
        })
        .collect();
    let mut model = MlpModel::init(&spec, seed).unwrap();
    for layer in model.layers_mut() {
        for b in layer.biases.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let batch = rng.random_range(1..=8);
    let x = Matrix::from_vec(
        batch,
        widths[0],
        (0..batch * widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let k = widths[depth];
    let y = match kind {
        LossKind::CrossEntropy => {
            let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
            one_hot(&ids, k).unwrap()
        }
        LossKind::Mse => Matrix::from_vec(batch, k, (0..batch * k).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
    };
    (model, x, y, kind)
}


/// Scalar reference network: nested loops over plain vectors, independent of the
/// library's matrix kernels and backward pass.
#[derive(Debug, Clone)]
pub struct OracleNet {
    /// `(weights[out][in], biases[out], activation)` per layer.
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>, Activation)>,
}

#[derive(Debug, Clone)]
pub struct OracleGrads {
    pub loss: f64,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

fn act_scalar(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Identity => z,
        Activation::Relu => z.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        Activation::Tanh => z.tanh(),
        Activation::Elu => {
            if z > 0.0 {
                z
            } else {
                z.exp() - 1.0
            }
        }
        Activation::Softmax => unreachable!("softmax is applied per row"),
    }
}

fn act_deriv(a: Activation, z: f64, out: f64) -> f64 {
    match a {
        Activation::Identity => 1.0,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => out * (1.0 - out),
        Activation::Tanh => 1.0 - out * out,
        Activation::Elu => {
            if z > 0.0 {
                1.0
            } else {
                z.exp()
            }
        }
        Activation::Softmax => unreachable!("softmax is handled through its Jacobian"),
    }
}

impl OracleNet {
    pub fn from_model(model: &MlpModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let w = (0..l.out_dim()).map(|o| l.weights.row(o).to_vec()).collect();
                (w, l.biases.clone(), l.activation)
            })
            .collect();
        Self { layers }
    }

    /// Returns `(pre-activations, activations)` per layer for one sample.
    fn forward_sample(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut zs = Vec::new();
        let mut outs: Vec<Vec<f64>> = Vec::new();
        for (w, b, act) in &self.layers {
            let input = outs.last().map_or(x, |v| v.as_slice());
            let z: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bias)| row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>() + bias)
                .collect();
            let out = if *act == Activation::Softmax {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            } else {
                z.iter().map(|&v| act_scalar(*act, v)).collect()
            };
            zs.push(z);
            outs.push(out);
        }
        (zs, outs)
    }

    /// Batch-mean loss and parameter gradients over `rows`.
    pub fn gradients(&self, xs: &[&[f64]], ys: &[Vec<f64>], kind: LossKind) -> OracleGrads {
        let b = xs.len() as f64;
        let mut g = OracleGrads {
            loss: 0.0,
            weights: self.layers.iter().map(|(w, _, _)| vec![vec![0.0; w[0].len()]; w.len()]).collect(),
            biases: self.layers.iter().map(|(_, bias, _)| vec![0.0; bias.len()]).collect(),
        };
        for (x, y) in xs.iter().zip(ys) {
            let (zs, outs) = self.forward_sample(x);
            let last = self.layers.len() - 1;
            let out = &outs[last];
            let k = out.len() as f64;
            let (loss, dout): (f64, Vec<f64>) = match kind {
                LossKind::CrossEntropy => (
                    -y.iter().zip(out).map(|(t, p)| t * p.max(1e-12).ln()).sum::<f64>() / b,
                    y.iter()
                        .zip(out)
                        .map(|(t, p)| if *p > 1e-12 { -t / p / b } else { 0.0 })
                        .collect(),
                ),
                LossKind::Mse => (
                    y.iter().zip(out).map(|(t, p)| (p - t) * (p - t)).sum::<f64>() / (b * k),
                    y.iter().zip(out).map(|(t, p)| 2.0 * (p - t) / (b * k)).collect(),
                ),
            };
            g.loss += loss;
            let act = self.layers[last].2;
            let mut delta: Vec<f64> = if act == Activation::Softmax && kind == LossKind::CrossEntropy {
                out.iter().zip(y).map(|(p, t)| (p - t) / b).collect()
            } else if act == Activation::Softmax {
                let dot: f64 = dout.iter().zip(out).map(|(d, p)| d * p).sum();
                out.iter().zip(&dout).map(|(p, d)| p * (d - dot)).collect()
            } else {
                (0..out.len()).map(|j| dout[j] * act_deriv(act, zs[last][j], out[j])).collect()
            };
            for l in (0..self.layers.len()).rev() {
                let input = if l == 0 { *x } else { outs[l - 1].as_slice() };
                for (o, d) in delta.iter().enumerate() {
                    g.biases[l][o] += d;
                    for (i, v) in input.iter().enumerate() {
                        g.weights[l][o][i] += d * v;
                    }
                }
                if l > 0 {
                    let w = &self.layers[l].0;
                    let prev = self.layers[l - 1].2;
                    delta = (0..input.len())
                        .map(|i| {
                            let back: f64 = (0..delta.len()).map(|o| w[o][i] * delta[o]).sum();
                            back * act_deriv(prev, zs[l - 1][i], outs[l - 1][i])
                        })
                        .collect();
                }
            }
        }
        g
    }

    pub fn step(&mut self, g: &OracleGrads, lr: f64) {
        for (l, (w, b, _)) in self.layers.iter_mut().enumerate() {
            for (o, row) in w.iter_mut().enumerate() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v -= lr * g.weights[l][o][i];
                }
                b[o] -= lr * g.biases[l][o];
            }
        }
    }

    pub fn max_abs_diff(&self, model: &MlpModel) -> f64 {
        let mut m: f64 = 0.0;
        for ((w, b, _), l) in self.layers.iter().zip(model.layers()) {
            for (o, row) in w.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    m = m.max((v - l.weights.get(o, i)).abs());
                }
                m = m.max((b[o] - l.biases[o]).abs());
            }
        }
        m
    }
}

pub fn oracle_grad_diff(o: &OracleGrads, g: &tl_core::nn::GradientSet) -> f64 {
    let mut m: f64 = 0.0;
    for (l, w) in o.weights.iter().enumerate() {
        for (r, row) in w.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m = m.max((v - g.weight_grads[l].get(r, c)).abs());
            }
            m = m.max((o.biases[l][r] - g.bias_grads[l][r]).abs());
        }
    }
    m
}

/// Centralized mini-batch SGD on `data`, batch cuts from the same seeded shuffle as
/// the virtual batches. Returns the trained net and each step's gradients.
pub fn oracle_train(
    init: &MlpModel,
    data: &tl_core::data::Dataset,
    batch_size: usize,
    seed: u64,
    epochs: usize,
    lr: f64,
    kind: LossKind,
) -> (OracleNet, Vec<(Vec<usize>, OracleGrads)>) {
    let mut net = OracleNet::from_model(init);
    let k = init.output_dim();
    let mut steps = Vec::new();
    for e in 0..epochs {
        let batches =
            tl_core::vbatch::shuffle_ids_into_batches(data.len(), batch_size, tl_core::vbatch::epoch_seed(seed, e))
                .unwrap();
        for b in batches {
            let xs: Vec<&[f64]> = b.global_ids.iter().map(|&g| data.features.row(g)).collect();
            let ys: Vec<Vec<f64>> = b
                .global_ids
                .iter()
                .map(|&g| (0..k).map(|c| if c == data.labels[g] { 1.0 } else { 0.0 }).collect())
                .collect();
            let g = net.gradients(&xs, &ys, kind);
            net.step(&g, lr);
            steps.push((b.global_ids, g));
        }
    }
    (net, steps)
}

pub fn blobs_shards(sizes: &[usize], features: usize, classes: usize, seed: u64) -> Vec<tl_core::data::NodeShard> {
    let total = sizes.iter().sum();
    let d = tl_core::data::gen_synthetic(total, features, classes, 1.0, seed).unwrap();
    let s = tl_core::data::Standardizer::fit(&d.features);
    let d = tl_core::data::Dataset::new(s.apply(&d.features), d.labels, d.class_count).unwrap();
    tl_core::data::partition_by_sizes(&d, sizes, seed ^ 0x5eed).unwrap()
}

/// The shards stacked in global-id order under a sequential index map.
pub fn centralized(shards: &[tl_core::data::NodeShard]) -> tl_core::data::Dataset {
    tl_core::data::Dataset::concat(&shards.iter().map(|s| &s.dataset).collect::<Vec<_>>()).unwrap()
}

pub fn sim_transport(shards: &[tl_core::data::NodeShard]) -> tl_core::simnet::SimTransport {
    let nodes = shards.iter().cloned().map(tl_core::node::NodeState::new).collect();
    tl_core::simnet::SimTransport::new(nodes, tl_core::simnet::LatencyModel::default()).unwrap()
}

pub fn spec(text: &str) -> Vec<LayerSpec> {
    tl_core::nn::parse_layer_spec(text).unwrap()
}

/// Relays messages, adding `bump` to the first-layer gradients of the `target`-th
/// node report.
pub struct Tamper<T> {
    pub inner: T,
    seen: usize,
    target: usize,
    bump: f64,
}

impl<T> Tamper<T> {
    pub fn new(inner: T, target: usize, bump: f64) -> Self {
        Self { inner, seen: 0, target, bump }
    }
}

impl<T: tl_core::simnet::Transport> tl_core::simnet::Transport for Tamper<T> {
    fn node_ids(&self) -> Vec<u32> {
        self.inner.node_ids()
    }

    fn send(&mut self, msg: tl_core::simnet::Message) -> tl_core::Result<()> {
        self.inner.send(msg)
    }

    fn recv(&mut self) -> tl_core::Result<tl_core::simnet::Message> {
        let mut msg = self.inner.recv()?;
        if msg.kind == tl_core::simnet::MessageKind::NodeReportMsg {
            if self.seen == self.target {
                let mut r = tl_core::node::NodeReport::from_bytes(&msg.payload)?;
                r.first_layer_grads.data_mut()[0] += self.bump;
                msg.payload = r.to_bytes()?;
            }
            self.seen += 1;
        }
        Ok(msg)
    }
}
