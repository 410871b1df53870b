//! Baseline trainers: degenerate reductions, symmetry, cut gradients, information flow.

mod common;

use common::{blobs_shards, centralized, spec};
use tl_core::baselines::{
    split_backward, train_cl, train_fedavg, train_sfl, train_sl, train_sl_plus, weighted_average, BaselineConfig,
};
use tl_core::data::{gen_synthetic, NodeShard};
use tl_core::nn::{finite_diff_grad, max_relative_error, relative_error, Activation, DenseLayer, LossKind, MlpModel};
use tl_core::Matrix;

const SPEC4: &str = "8,10:tanh,8:relu,6:sigmoid,3:softmax";

fn cfg(epochs: usize, seed: u64) -> BaselineConfig {
    BaselineConfig {
        learning_rate: 0.1,
        epochs,
        batch_size: 12,
        seed,
        ..BaselineConfig::default()
    }
}

fn one_shard(n: usize, seed: u64) -> Vec<NodeShard> {
    blobs_shards(&[n], 8, 3, seed)
}

#[test]
fn cl_learns_separable_blobs() {
    let d = gen_synthetic(300, 8, 3, 0.5, 3).unwrap();
    let mut c = cfg(30, 3);
    c.batch_size = 32;
    let out = train_cl(&d, &spec("8,16:relu,3:softmax"), &c).unwrap();
    let pred = out.model.predict(&d.features).unwrap().argmax_rows();
    let acc = pred.iter().zip(&d.labels).filter(|(a, b)| a == b).count() as f64 / d.len() as f64;
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn cl_zero_epochs_and_determinism() {
    let d = gen_synthetic(40, 8, 3, 1.0, 1).unwrap();
    let s = spec(SPEC4);
    assert_eq!(train_cl(&d, &s, &cfg(0, 9)).unwrap().model, MlpModel::init(&s, 9).unwrap());
    assert_eq!(train_cl(&d, &s, &cfg(2, 9)).unwrap().model, train_cl(&d, &s, &cfg(2, 9)).unwrap().model);
}

#[test]
fn single_client_methods_collapse_to_cl() {
    let shards = one_shard(50, 4);
    let data = centralized(&shards);
    let s = spec(SPEC4);
    let cl = train_cl(&data, &s, &cfg(3, 4)).unwrap().model;
    let fed = train_fedavg(&shards, &s, &cfg(3, 4)).unwrap().model;
    assert!(cl.max_abs_diff(&fed).unwrap() <= 1e-9);
    for split in 1..=3 {
        let mut c = cfg(3, 4);
        c.split_layer = split;
        let sl = train_sl(&shards, &s, &c).unwrap().model;
        assert!(cl.max_abs_diff(&sl).unwrap() <= 1e-9, "sl split {split}");
        let sfl = train_sfl(&shards, &s, &c).unwrap().model;
        assert!(sl.max_abs_diff(&sfl).unwrap() <= 1e-9, "sfl split {split}");
        if split <= 2 {
            let plus = train_sl_plus(&shards, &s, &c).unwrap().model;
            assert!(cl.max_abs_diff(&plus).unwrap() <= 1e-9, "sl+ split {split}");
        }
    }
}

fn twin(shard: &NodeShard) -> Vec<NodeShard> {
    vec![shard.clone(), NodeShard { node_id: 1, dataset: shard.dataset.clone() }]
}

#[test]
fn identical_shards_average_to_a_single_client() {
    let base = one_shard(36, 7);
    let s = spec(SPEC4);
    let single = train_fedavg(&base, &s, &cfg(2, 7)).unwrap().model;
    let pair = train_fedavg(&twin(&base[0]), &s, &cfg(2, 7)).unwrap().model;
    assert!(single.max_abs_diff(&pair).unwrap() <= 1e-12);

    let mut c = cfg(2, 7);
    c.split_layer = 2;
    let single = train_sfl(&base, &s, &c).unwrap().model;
    let pair = train_sfl(&twin(&base[0]), &s, &c).unwrap().model;
    assert!(single.max_abs_diff(&pair).unwrap() <= 1e-12);
}

#[test]
fn weighted_average_arithmetic() {
    let layer = |v: f64| DenseLayer::new(Matrix::from_rows(&[vec![v]]).unwrap(), vec![v], Activation::Identity).unwrap();
    let a = MlpModel::new(vec![layer(0.0)]).unwrap();
    let b = MlpModel::new(vec![layer(3.0)]).unwrap();
    let avg = weighted_average(&[(&a, 2), (&b, 1)]).unwrap();
    assert!((avg.layers()[0].weights.get(0, 0) - 1.0).abs() < 1e-15);
    assert!((avg.layers()[0].biases[0] - 1.0).abs() < 1e-15);
    assert_eq!(weighted_average(&[(&b, 5), (&b, 3)]).unwrap(), b);
    assert!(weighted_average(&[]).is_err());
}

/// An identity layer in front of `model`, so the finite-difference oracle's
/// first-layer gradient is the gradient with respect to `model`'s input.
fn with_identity_prefix(parts: &[&MlpModel]) -> MlpModel {
    let d = parts[0].input_dim();
    let id = DenseLayer::new(Matrix::identity(d), vec![0.0; d], Activation::Identity).unwrap();
    let mut layers = vec![id];
    for p in parts {
        layers.extend(p.layers().iter().cloned());
    }
    MlpModel::new(layers).unwrap()
}

fn cut_instance(seed: u64, width: usize, batch: usize, classes: usize) -> (Matrix, Matrix) {
    let d = gen_synthetic(batch, width, classes, 1.0, seed).unwrap();
    (d.features.scale(0.5), tl_core::nn::one_hot(&d.labels, classes).unwrap())
}

#[test]
fn sl_cut_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let kind = if seed % 2 == 0 { LossKind::CrossEntropy } else { LossKind::Mse };
        let server = MlpModel::init(&spec("6,5:tanh,4:elu,3:softmax"), seed).unwrap();
        let (h, y) = cut_instance(seed, 6, 7, 3);
        let step = split_backward(&server, None, &h, &y, kind).unwrap();
        assert_eq!(step.cut_grad.shape(), h.shape());
        let fd = finite_diff_grad(&with_identity_prefix(&[&server]), &h, &y, kind, 1e-6).unwrap();
        for (a, b) in step.cut_grad.data().iter().zip(fd.input_grad.data()) {
            assert!(relative_error(*a, *b) <= 1e-5, "seed {seed}: {a} vs {b}");
        }
        for l in 0..server.depth() {
            let e = step.server_grads.weight_grads[l]
                .data()
                .iter()
                .zip(fd.weight_grads[l + 1].data())
                .map(|(a, b)| relative_error(*a, *b))
                .fold(0.0, f64::max);
            assert!(e <= 1e-5, "seed {seed} layer {l}: {e:e}");
        }
    }
}

#[test]
fn sl_plus_middle_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let kind = if seed % 2 == 0 { LossKind::CrossEntropy } else { LossKind::Mse };
        let server = MlpModel::init(&spec("6,5:sigmoid,4:relu"), seed).unwrap();
        let tail = MlpModel::init(&spec("4,3:softmax"), seed + 50).unwrap();
        let (h, y) = cut_instance(seed, 6, 5, 3);
        let step = split_backward(&server, Some(&tail), &h, &y, kind).unwrap();
        let fd = finite_diff_grad(&with_identity_prefix(&[&server, &tail]), &h, &y, kind, 1e-6).unwrap();
        for (a, b) in step.cut_grad.data().iter().zip(fd.input_grad.data()) {
            assert!(relative_error(*a, *b) <= 1e-5, "seed {seed}: {a} vs {b}");
        }
        let mut analytic = fd.clone();
        for l in 0..server.depth() {
            analytic.weight_grads[l + 1] = step.server_grads.weight_grads[l].clone();
            analytic.bias_grads[l + 1] = step.server_grads.bias_grads[l].clone();
        }
        let tail_grads = step.tail_grads.unwrap();
        analytic.weight_grads[3] = tail_grads.weight_grads[0].clone();
        analytic.bias_grads[3] = tail_grads.bias_grads[0].clone();
        assert!(max_relative_error(&analytic, &fd) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn sl_shares_labels_and_sl_plus_does_not() {
    let shards = blobs_shards(&[20, 16], 8, 3, 2);
    let s = spec(SPEC4);
    let mut c = cfg(1, 2);
    c.record_messages = true;
    let sl = train_sl(&shards, &s, &c).unwrap();
    assert!(!sl.server_transcript.is_empty());
    assert!(sl.server_transcript.iter().all(|m| m.contains("\"labels\"")));
    let plus = train_sl_plus(&shards, &s, &c).unwrap();
    assert!(!plus.server_transcript.is_empty());
    for m in &plus.server_transcript {
        let v: serde_json::Value = serde_json::from_str(m).unwrap();
        let body = v.as_object().unwrap().values().next().unwrap();
        let keys: Vec<&String> = body.as_object().unwrap().keys().collect();
        assert!(keys.iter().all(|k| *k == "client" || *k == "smashed" || *k == "grad"), "{keys:?}");
    }
}

#[test]
fn split_configuration_errors() {
    let shards = one_shard(10, 0);
    let s = spec(SPEC4);
    for bad in [0, 4] {
        let mut c = cfg(1, 0);
        c.split_layer = bad;
        assert!(train_sl(&shards, &s, &c).is_err());
        assert!(train_sfl(&shards, &s, &c).is_err());
    }
    let mut c = cfg(1, 0);
    c.split_layer = 3;
    assert!(train_sl_plus(&shards, &s, &c).is_err());
    c.split_layer = 1;
    assert!(train_sl_plus(&shards, &spec("8,4:relu,3:softmax"), &c).is_err());
    assert!(train_fedavg(&[], &s, &c).is_err());
    let mut c = cfg(1, 0);
    c.local_epochs = 0;
    assert!(train_fedavg(&shards, &s, &c).is_err());
}

#[test]
fn every_method_is_deterministic() {
    let shards = blobs_shards(&[15, 22, 9], 8, 3, 5);
    let s = spec(SPEC4);
    let mut c = cfg(2, 5);
    c.split_layer = 2;
    c.local_epochs = 2;
    type Trainer = fn(&[NodeShard], &[tl_core::nn::LayerSpec], &BaselineConfig) -> tl_core::Result<tl_core::baselines::BaselineOutcome>;
    let trainers: [Trainer; 4] = [train_fedavg, train_sl, train_sl_plus, train_sfl];
    for t in trainers {
        let a = t(&shards, &s, &c).unwrap();
        let b = t(&shards, &s, &c).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.model.layers().iter().all(|l| l.weights.is_finite()));
        assert!(!a.metrics.is_empty());
    }
}
