//! Reference trainers: centralized learning, FedAvg, split learning (with and
//! without label sharing), and split-federated learning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NodeShard};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    backprop, forward_full, loss_and_delta, sgd_step_in_place, ForwardTrace, GradientSet, LayerSpec, LossKind,
    MlpModel,
};
use crate::vbatch::{epoch_seed, shuffle_ids_into_batches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of layers on the client side of the cut.
    pub split_layer: usize,
    pub local_epochs: usize,
    pub loss_kind: LossKind,
    /// Keep a JSON transcript of every message sent to the server (split methods).
    pub record_messages: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            split_layer: 1,
            local_epochs: 1,
            loss_kind: LossKind::CrossEntropy,
            record_messages: false,
        }
    }
}

impl BaselineConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn validate_split(&self, depth: usize, max_split: usize) -> Result<()> {
        if self.split_layer == 0 || self.split_layer > max_split {
            return Err(Error::Config(format!(
                "split_layer {} invalid for a {depth}-layer model (allowed 1..={max_split})",
                self.split_layer
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub method: String,
    pub epoch: usize,
    /// Batch index within the epoch, or the client index for per-client records.
    pub batch: u32,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: MlpModel,
    pub metrics: Vec<BaselineMetrics>,
    /// JSON of server-bound messages when `record_messages` is set.
    pub server_transcript: Vec<String>,
}

fn gradient_set(weight_grads: Vec<Matrix>, bias_grads: Vec<Vec<f64>>) -> GradientSet {
    GradientSet {
        weight_grads,
        bias_grads,
        input_grad: Matrix::zeros(0, 0),
    }
}

fn batch_xy(data: &Dataset, ids: &[usize], classes: usize) -> Result<(Matrix, Matrix, Vec<usize>)> {
    let labels: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
    let y = crate::nn::one_hot(&labels, classes)?;
    Ok((data.features.select_rows(ids), y, labels))
}

/// Loss and delta at the output of `trace`.
fn output_delta(model: &MlpModel, trace: &ForwardTrace, y: &Matrix, kind: LossKind) -> Result<(f64, Matrix)> {
    let last = trace.pre_activations.len() - 1;
    let ld = loss_and_delta(
        trace.output(),
        &trace.pre_activations[last],
        model.output_activation(),
        y,
        kind,
        y.rows(),
    )?;
    Ok((ld.loss, ld.delta))
}

/// Backward pass given `∂L/∂(output activation)` rather than a delta.
fn backprop_from_output_grad(model: &MlpModel, trace: &ForwardTrace, grad_out: &Matrix) -> Result<(GradientSet, Matrix)> {
    let last = trace.pre_activations.len() - 1;
    let delta = model
        .output_activation()
        .backprop(&trace.pre_activations[last], trace.output(), grad_out)?;
    backprop_delta(model, trace, &delta)
}

/// Parameter gradients plus `∂L/∂(model input)`.
fn backprop_delta(model: &MlpModel, trace: &ForwardTrace, delta: &Matrix) -> Result<(GradientSet, Matrix)> {
    let partial = backprop(model, trace, delta)?;
    let input_grad = partial.input_gradient(model)?;
    Ok((gradient_set(partial.weight_grads, partial.bias_grads), input_grad))
}

fn sgd_batch(model: &mut MlpModel, x: &Matrix, y: &Matrix, kind: LossKind, lr: f64) -> Result<f64> {
    let trace = forward_full(model, x)?;
    let (loss, delta) = output_delta(model, &trace, y, kind)?;
    let partial = backprop(model, &trace, &delta)?;
    sgd_step_in_place(model, &gradient_set(partial.weight_grads, partial.bias_grads), lr)?;
    Ok(loss)
}

/// Mini-batch SGD over `data`, one seeded shuffle per epoch.
fn local_sgd(
    model: &mut MlpModel,
    data: &Dataset,
    config: &BaselineConfig,
    seeds: impl Iterator<Item = u64>,
    mut on_batch: impl FnMut(usize, u32, f64),
) -> Result<()> {
    for (e, seed) in seeds.enumerate() {
        for batch in shuffle_ids_into_batches(data.len(), config.batch_size, seed)? {
            let (x, y, _) = batch_xy(data, &batch.global_ids, model.output_dim())?;
            let loss = sgd_batch(model, &x, &y, config.loss_kind, config.learning_rate)?;
            on_batch(e, batch.batch_id, loss);
        }
    }
    Ok(())
}

fn metric(method: &str, epoch: usize, batch: u32, loss: f64, started: Instant) -> BaselineMetrics {
    BaselineMetrics {
        method: method.into(),
        epoch,
        batch,
        loss,
        wall_ms: started.elapsed().as_secs_f64() * 1000.0,
    }
}

/// Centralized training. Epoch `e` shuffles with seed `seed + e`, matching the
/// virtual batches built over sequential global ids.
pub fn train_cl(dataset: &Dataset, layer_spec: &[LayerSpec], config: &BaselineConfig) -> Result<BaselineOutcome> {
    config.validate()?;
    let mut model = MlpModel::init(layer_spec, config.seed)?;
    let started = Instant::now();
    let mut metrics = Vec::new();
    let seeds = (0..config.epochs).map(|e| epoch_seed(config.seed, e));
    local_sgd(&mut model, dataset, config, seeds, |e, b, loss| {
        metrics.push(metric("cl", e, b, loss, started))
    })?;
    Ok(BaselineOutcome {
        model,
        metrics,
        server_transcript: Vec::new(),
    })
}

fn check_shards(shards: &[NodeShard]) -> Result<()> {
    if shards.is_empty() {
        return Err(Error::Config("at least one client shard is required".into()));
    }
    if let Some(s) = shards.iter().find(|s| s.dataset.is_empty()) {
        return Err(Error::Config(format!("client {} has an empty shard", s.node_id)));
    }
    Ok(())
}

/// Sample-count-weighted average as a running mean, in the given order. Averaging
/// identical models returns them unchanged.
pub fn weighted_average(models: &[(&MlpModel, usize)]) -> Result<MlpModel> {
    let (first, w0) = models
        .first()
        .ok_or_else(|| Error::Validation("nothing to average".into()))?;
    let mut mean = (*first).clone();
    let mut total = *w0 as f64;
    for (m, w) in &models[1..] {
        if m.spec() != mean.spec() {
            return Err(Error::Validation("cannot average models of different shapes".into()));
        }
        let w = *w as f64;
        total += w;
        for (acc, layer) in mean.layers_mut().iter_mut().zip(m.layers()) {
            for (a, p) in acc.weights.data_mut().iter_mut().zip(layer.weights.data()) {
                *a += (p - *a) * w / total;
            }
            for (a, p) in acc.biases.iter_mut().zip(&layer.biases) {
                *a += (p - *a) * w / total;
            }
        }
    }
    Ok(mean)
}

/// FedAvg: each round every client runs `local_epochs` epochs of SGD from the global
/// model; the global model becomes the sample-weighted average. Client epoch `e` of
/// round `r` shuffles with seed `seed + r·E + e`.
pub fn train_fedavg(shards: &[NodeShard], layer_spec: &[LayerSpec], config: &BaselineConfig) -> Result<BaselineOutcome> {
    config.validate()?;
    check_shards(shards)?;
    let mut global = MlpModel::init(layer_spec, config.seed)?;
    let started = Instant::now();
    let mut metrics = Vec::new();
    let e = config.local_epochs as u64;
    for round in 0..config.epochs {
        let mut locals = Vec::with_capacity(shards.len());
        for (c, shard) in shards.iter().enumerate() {
            let mut local = global.clone();
            let base = config.seed.wrapping_add(round as u64 * e);
            let mut sum = 0.0;
            let mut count = 0;
            local_sgd(&mut local, &shard.dataset, config, (0..e).map(|i| base.wrapping_add(i)), |_, _, loss| {
                sum += loss;
                count += 1;
            })?;
            metrics.push(metric("fedavg", round, c as u32, sum / count.max(1) as f64, started));
            locals.push((local, shard.dataset.len()));
        }
        let refs: Vec<(&MlpModel, usize)> = locals.iter().map(|(m, n)| (m, *n)).collect();
        global = weighted_average(&refs)?;
    }
    Ok(BaselineOutcome {
        model: global,
        metrics,
        server_transcript: Vec::new(),
    })
}

/// Client to server in vanilla split learning: the cut activations and the labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlUpload {
    pub client: u32,
    pub smashed: Matrix,
    pub labels: Vec<usize>,
}

/// Client to server in the label-free variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SlPlusUpload {
    /// Output of the client's head.
    Smashed { client: u32, smashed: Matrix },
    /// Gradient with respect to the server's output, computed by the client tail.
    TailGradient { client: u32, grad: Matrix },
}

struct SplitModels {
    head: MlpModel,
    server: MlpModel,
    tail: Option<MlpModel>,
}

impl SplitModels {
    fn split(model: &MlpModel, s: usize, with_tail: bool) -> Result<Self> {
        let depth = model.depth();
        Ok(if with_tail {
            Self {
                head: model.slice(0..s)?,
                server: model.slice(s..depth - 1)?,
                tail: Some(model.slice(depth - 1..depth)?),
            }
        } else {
            Self {
                head: model.slice(0..s)?,
                server: model.slice(s..depth)?,
                tail: None,
            }
        })
    }

    fn join(&self) -> Result<MlpModel> {
        match &self.tail {
            Some(t) => MlpModel::concat(&[&self.head, &self.server, t]),
            None => MlpModel::concat(&[&self.head, &self.server]),
        }
    }
}

fn record<T: Serialize>(config: &BaselineConfig, transcript: &mut Vec<String>, msg: &T) -> Result<()> {
    if config.record_messages {
        transcript.push(serde_json::to_string(msg).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(())
}

/// Server-side (and, with a tail, client-tail) backward pass of one split step,
/// computed at the current weights.
#[derive(Debug, Clone)]
pub struct SplitBackward {
    pub loss: f64,
    pub server_grads: GradientSet,
    pub tail_grads: Option<GradientSet>,
    /// `∂L/∂(server output)`, sent by the client tail.
    pub tail_gradient: Option<Matrix>,
    /// `∂L/∂(smashed activations)`, returned to the client head.
    pub cut_grad: Matrix,
}

pub fn split_backward(
    server: &MlpModel,
    tail: Option<&MlpModel>,
    smashed: &Matrix,
    y: &Matrix,
    kind: LossKind,
) -> Result<SplitBackward> {
    let server_trace = forward_full(server, smashed)?;
    match tail {
        None => {
            let (loss, delta) = output_delta(server, &server_trace, y, kind)?;
            let (server_grads, cut_grad) = backprop_delta(server, &server_trace, &delta)?;
            Ok(SplitBackward {
                loss,
                server_grads,
                tail_grads: None,
                tail_gradient: None,
                cut_grad,
            })
        }
        Some(tail) => {
            let tail_trace = forward_full(tail, server_trace.output())?;
            let (loss, delta) = output_delta(tail, &tail_trace, y, kind)?;
            let (tail_grads, grad_to_server) = backprop_delta(tail, &tail_trace, &delta)?;
            let (server_grads, cut_grad) = backprop_from_output_grad(server, &server_trace, &grad_to_server)?;
            Ok(SplitBackward {
                loss,
                server_grads,
                tail_grads: Some(tail_grads),
                tail_gradient: Some(grad_to_server),
                cut_grad,
            })
        }
    }
}

/// One split-learning step on a batch. Every gradient is taken at the pre-step
/// weights.
fn sl_step(
    parts: &mut SplitModels,
    client: u32,
    x: &Matrix,
    y: &Matrix,
    labels: Vec<usize>,
    config: &BaselineConfig,
    transcript: &mut Vec<String>,
) -> Result<f64> {
    let lr = config.learning_rate;
    let head_trace = forward_full(&parts.head, x)?;
    let smashed = head_trace.output().clone();
    let step = match &mut parts.tail {
        None => {
            let upload = SlUpload {
                client,
                smashed,
                labels,
            };
            record(config, transcript, &upload)?;
            split_backward(&parts.server, None, &upload.smashed, y, config.loss_kind)?
        }
        Some(tail) => {
            record(config, transcript, &SlPlusUpload::Smashed { client, smashed: smashed.clone() })?;
            let step = split_backward(&parts.server, Some(tail), &smashed, y, config.loss_kind)?;
            let grad = step.tail_gradient.clone().expect("tail present");
            record(config, transcript, &SlPlusUpload::TailGradient { client, grad })?;
            sgd_step_in_place(tail, step.tail_grads.as_ref().expect("tail present"), lr)?;
            step
        }
    };
    sgd_step_in_place(&mut parts.server, &step.server_grads, lr)?;
    let (head_grads, _) = backprop_from_output_grad(&parts.head, &head_trace, &step.cut_grad)?;
    sgd_step_in_place(&mut parts.head, &head_grads, lr)?;
    Ok(step.loss)
}

fn train_split_sequential(
    shards: &[NodeShard],
    layer_spec: &[LayerSpec],
    config: &BaselineConfig,
    with_tail: bool,
) -> Result<BaselineOutcome> {
    config.validate()?;
    check_shards(shards)?;
    let model = MlpModel::init(layer_spec, config.seed)?;
    let depth = model.depth();
    let method = if with_tail { "sl_plus" } else { "sl" };
    if with_tail {
        if depth < 3 {
            return Err(Error::Config(format!(
                "sl_plus needs at least 3 layers, model has {depth}"
            )));
        }
        config.validate_split(depth, depth - 2)?;
    } else {
        if depth < 2 {
            return Err(Error::Config("split learning needs at least 2 layers".into()));
        }
        config.validate_split(depth, depth - 1)?;
    }
    let mut parts = SplitModels::split(&model, config.split_layer, with_tail)?;
    let mut transcript = Vec::new();
    let mut metrics = Vec::new();
    let started = Instant::now();
    let classes = model.output_dim();
    for epoch in 0..config.epochs {
        // Clients take turns, handing the client-side weights to the next one.
        for shard in shards {
            let data = &shard.dataset;
            for batch in shuffle_ids_into_batches(data.len(), config.batch_size, epoch_seed(config.seed, epoch))? {
                let (x, y, labels) = batch_xy(data, &batch.global_ids, classes)?;
                let loss = sl_step(&mut parts, shard.node_id, &x, &y, labels, config, &mut transcript)?;
                metrics.push(metric(method, epoch, batch.batch_id, loss, started));
            }
        }
    }
    Ok(BaselineOutcome {
        model: parts.join()?,
        metrics,
        server_transcript: transcript,
    })
}

/// Vanilla split learning: clients hold layers `1..=s` and share labels with the
/// server.
pub fn train_sl(shards: &[NodeShard], layer_spec: &[LayerSpec], config: &BaselineConfig) -> Result<BaselineOutcome> {
    train_split_sequential(shards, layer_spec, config, false)
}

/// Split learning with the last layer kept on the client, so labels stay local.
pub fn train_sl_plus(shards: &[NodeShard], layer_spec: &[LayerSpec], config: &BaselineConfig) -> Result<BaselineOutcome> {
    train_split_sequential(shards, layer_spec, config, true)
}

/// Split-federated learning: clients train in parallel against their own server
/// replica; after each round the client parts and the server parts are averaged.
pub fn train_sfl(shards: &[NodeShard], layer_spec: &[LayerSpec], config: &BaselineConfig) -> Result<BaselineOutcome> {
    config.validate()?;
    check_shards(shards)?;
    let model = MlpModel::init(layer_spec, config.seed)?;
    let depth = model.depth();
    if depth < 2 {
        return Err(Error::Config("split learning needs at least 2 layers".into()));
    }
    config.validate_split(depth, depth - 1)?;
    let s = config.split_layer;
    let mut global = SplitModels::split(&model, s, false)?;
    let mut transcript = Vec::new();
    let mut metrics = Vec::new();
    let started = Instant::now();
    let classes = model.output_dim();
    let e = config.local_epochs as u64;
    for round in 0..config.epochs {
        let mut replicas = Vec::with_capacity(shards.len());
        for (c, shard) in shards.iter().enumerate() {
            let mut parts = SplitModels {
                head: global.head.clone(),
                server: global.server.clone(),
                tail: None,
            };
            let base = config.seed.wrapping_add(round as u64 * e);
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..e {
                for batch in shuffle_ids_into_batches(shard.dataset.len(), config.batch_size, base.wrapping_add(i))? {
                    let (x, y, labels) = batch_xy(&shard.dataset, &batch.global_ids, classes)?;
                    sum += sl_step(&mut parts, shard.node_id, &x, &y, labels, config, &mut transcript)?;
                    count += 1;
                }
            }
            metrics.push(metric("sfl", round, c as u32, sum / count.max(1) as f64, started));
            replicas.push((parts, shard.dataset.len()));
        }
        let heads: Vec<(&MlpModel, usize)> = replicas.iter().map(|(p, n)| (&p.head, *n)).collect();
        let servers: Vec<(&MlpModel, usize)> = replicas.iter().map(|(p, n)| (&p.server, *n)).collect();
        global = SplitModels {
            head: weighted_average(&heads)?,
            server: weighted_average(&servers)?,
            tail: None,
        };
    }
    Ok(BaselineOutcome {
        model: global.join()?,
        metrics,
        server_transcript: transcript,
    })
}
