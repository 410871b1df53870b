//! Dense layers, the multi-layer perceptron, and forward traces.
//!
//! A layer maps a batch `X` (samples as rows) to `Z = X·Wᵀ + b` and `f(Z)`,
//! with `W` stored as `out_dim × in_dim`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::wire::{WireReader, WireWriter};

pub const MODEL_MAGIC: &[u8; 4] = b"TLMD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.rows() != biases.len() {
            return Err(Error::Validation(format!(
                "layer has {} weight rows but {} biases",
                weights.rows(),
                biases.len()
            )));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.in_dim(), self.out_dim(), self.activation)
    }
}

/// Returns `(Z, f(Z))` for one layer.
pub fn dense_forward(layer: &DenseLayer, input: &Matrix) -> Result<(Matrix, Matrix)> {
    if input.cols() != layer.in_dim() {
        return Err(Error::dim(
            "dense_forward input",
            (input.rows(), layer.in_dim()),
            input.shape(),
        ));
    }
    let mut z = input.matmul_t(&layer.weights)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.biases) {
            *v += b;
        }
    }
    let a = layer.activation.apply(&z);
    Ok((z, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Checks a layer chain: at least one layer, positive dims, matching widths, and
/// softmax only on the final layer.
pub fn validate_layer_spec(spec: &[LayerSpec]) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::Validation("model needs at least one layer".into()));
    }
    for (i, l) in spec.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::Validation(format!("layer {i} has a zero dimension")));
        }
        if l.activation == Activation::Softmax && i + 1 != spec.len() {
            return Err(Error::Validation(format!(
                "softmax is only permitted on the final layer (found on layer {i})"
            )));
        }
        if i > 0 && spec[i - 1].out_dim != l.in_dim {
            return Err(Error::Validation(format!(
                "broken dimension chain: layer {} outputs {} but layer {i} expects {}",
                i - 1,
                spec[i - 1].out_dim,
                l.in_dim
            )));
        }
    }
    Ok(())
}

/// Parses a compact layer description such as `"8,16:relu,3:softmax"`.
pub fn parse_layer_spec(text: &str) -> Result<Vec<LayerSpec>> {
    let mut parts = text.split(',').map(str::trim);
    let first = parts
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Validation("empty layer spec".into()))?;
    let mut in_dim: usize = first
        .parse()
        .map_err(|_| Error::Validation(format!("bad input width {first:?}")))?;
    let mut out = Vec::new();
    for p in parts {
        let (width, act) = p
            .split_once(':')
            .ok_or_else(|| Error::Validation(format!("layer {p:?} must be WIDTH:ACTIVATION")))?;
        let width: usize = width
            .parse()
            .map_err(|_| Error::Validation(format!("bad layer width {width:?}")))?;
        out.push(LayerSpec::new(in_dim, width, act.parse()?));
        in_dim = width;
    }
    validate_layer_spec(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let spec: Vec<LayerSpec> = layers.iter().map(DenseLayer::spec).collect();
        validate_layer_spec(&spec)?;
        Ok(Self { layers })
    }

    /// Seeded initialization: weights uniform in `±1/√in_dim`, biases zero.
    pub fn init(spec: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_layer_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.in_dim as f64).sqrt();
                let data = (0..s.in_dim * s.out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                DenseLayer {
                    weights: Matrix::from_vec(s.out_dim, s.in_dim, data).expect("sized"),
                    biases: vec![0.0; s.out_dim],
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(DenseLayer::spec).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.biases.len())
            .sum()
    }

    /// Layers `range` as a standalone model (used by the split-learning baselines).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<MlpModel> {
        if range.start >= range.end || range.end > self.layers.len() {
            return Err(Error::Validation(format!(
                "layer range {range:?} invalid for a {}-layer model",
                self.layers.len()
            )));
        }
        Ok(Self {
            layers: self.layers[range].to_vec(),
        })
    }

    /// Concatenates consecutive parts back into one model.
    pub fn concat(parts: &[&MlpModel]) -> Result<MlpModel> {
        let layers = parts.iter().flat_map(|p| p.layers.iter().cloned()).collect();
        MlpModel::new(layers)
    }

    pub fn forward(&self, input: &Matrix) -> Result<ForwardTrace> {
        forward_full(self, input)
    }

    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = dense_forward(layer, &x).map_err(|e| at_layer(e, i))?.1;
        }
        Ok(x)
    }

    pub fn max_abs_diff(&self, other: &MlpModel) -> Result<f64> {
        if self.spec() != other.spec() {
            return Err(Error::Validation("models have different layer specs".into()));
        }
        let mut d: f64 = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            d = d.max(a.weights.max_abs_diff(&b.weights)?);
            for (x, y) in a.biases.iter().zip(&b.biases) {
                d = d.max((x - y).abs());
            }
        }
        Ok(d)
    }

    /// TLMD encoding: magic, u32 layer count, then per layer u32 out_dim, u32 in_dim,
    /// u8 activation tag, weights row-major f64 LE, biases f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.out_dim() as u32);
            w.u32(l.in_dim() as u32);
            w.u8(l.activation.tag());
            for v in l.weights.data() {
                w.f64(*v);
            }
            for v in &l.biases {
                w.f64(*v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WireReader::new(bytes, "TLMD model");
        r.magic(MODEL_MAGIC)?;
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(Error::Format("TLMD model with zero layers".into()));
        }
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let out_dim = r.u32()? as usize;
            let in_dim = r.u32()? as usize;
            let activation = Activation::from_tag(r.u8()?)?;
            let n = out_dim
                .checked_mul(in_dim)
                .ok_or_else(|| Error::Format("TLMD layer size overflow".into()))?;
            let weights = Matrix::from_vec(out_dim, in_dim, r.f64s(n)?)?;
            let biases = r.f64s(out_dim)?;
            layers.push(DenseLayer {
                weights,
                biases,
                activation,
            });
        }
        r.finish()?;
        MlpModel::new(layers).map_err(|e| Error::Format(format!("invalid TLMD model: {e}")))
    }
}

fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::Dimension {
            context,
            expected,
            got,
        } => Error::Dimension {
            context: format!("layer {layer}: {context}"),
            expected,
            got,
        },
        other => other,
    }
}

/// Pre-activations and activations for layers `start..L`.
///
/// A full trace starts at layer 0 with the raw batch as `input`. The orchestrator's
/// recalculated trace starts at layer 1 and its `input` is the assembled first-layer
/// activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub start: usize,
    pub input: Matrix,
    pub pre_activations: Vec<Matrix>,
    pub activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap_or(&self.input)
    }

    /// Activation of absolute layer `layer`, where layer `start - 1` is the input.
    pub fn activation(&self, layer: usize) -> Option<&Matrix> {
        if layer + 1 == self.start {
            Some(&self.input)
        } else {
            layer
                .checked_sub(self.start)
                .and_then(|i| self.activations.get(i))
        }
    }

    pub fn pre_activation(&self, layer: usize) -> Option<&Matrix> {
        layer
            .checked_sub(self.start)
            .and_then(|i| self.pre_activations.get(i))
    }

    /// Input to absolute layer `layer`.
    pub fn layer_input(&self, layer: usize) -> Option<&Matrix> {
        if layer == self.start {
            Some(&self.input)
        } else {
            layer.checked_sub(1).and_then(|l| self.activation(l))
        }
    }
}

/// Runs layers `start..L` on `input`, which must be the input to layer `start`.
pub fn forward_from(model: &MlpModel, start: usize, input: &Matrix) -> Result<ForwardTrace> {
    if start > model.depth() {
        return Err(Error::Validation(format!(
            "start layer {start} beyond model depth {}",
            model.depth()
        )));
    }
    let mut pre = Vec::with_capacity(model.depth() - start);
    let mut act: Vec<Matrix> = Vec::with_capacity(model.depth() - start);
    for (i, layer) in model.layers().iter().enumerate().skip(start) {
        let x = act.last().unwrap_or(input);
        let (z, a) = dense_forward(layer, x).map_err(|e| at_layer(e, i))?;
        pre.push(z);
        act.push(a);
    }
    Ok(ForwardTrace {
        start,
        input: input.clone(),
        pre_activations: pre,
        activations: act,
    })
}

pub fn forward_full(model: &MlpModel, input: &Matrix) -> Result<ForwardTrace> {
    forward_from(model, 0, input)
}
