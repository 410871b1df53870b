//! Centralized phase and the training loop: collect node reports, reassemble the
//! batch, recalculate activations from layer 2 on, backpropagate, update, and
//! redistribute the model.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{backprop, forward_from, sgd_step_in_place, ForwardTrace, GradientSet, LayerSpec, LossKind, MlpModel};
use crate::node::{NodeReport, StepAssignment};
use crate::simnet::{decode_index_range, Message, MessageKind, Transport, ORCHESTRATOR_ID};
use crate::vbatch::{build_global_index, collect_index_ranges, plan_epoch, IndexRangeReport};

/// How node delta rows are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Rows scattered by position; matches centralized training exactly.
    #[default]
    PerSample,
    /// Unweighted mean over nodes of each node's mean delta.
    NodeMean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::PerSample => "per-sample",
            Aggregation::NodeMean => "node-mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" => Ok(Aggregation::PerSample),
            "node-mean" => Ok(Aggregation::NodeMean),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?} (expected per-sample or node-mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionMode {
    /// One step in flight at a time, in plan order.
    #[default]
    Deterministic,
    /// All steps of a batch dispatched at once; reports accepted in any order.
    Pipelined,
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionMode::Deterministic => "deterministic",
            ExecutionMode::Pipelined => "pipelined",
        })
    }
}

impl FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(ExecutionMode::Deterministic),
            "pipelined" => Ok(ExecutionMode::Pipelined),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected deterministic or pipelined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyPolicy {
    #[default]
    Warn,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model initialization seed and base of the per-epoch shuffle seeds.
    pub seed: u64,
    pub aggregation: Aggregation,
    pub mode: ExecutionMode,
    pub tolerance: f64,
    pub on_inconsistency: ConsistencyPolicy,
    pub loss_kind: LossKind,
    pub randomize_ids: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep every batch's gradient set in the outcome.
    pub record_gradients: bool,
}

impl Default for TlConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            aggregation: Aggregation::PerSample,
            mode: ExecutionMode::Deterministic,
            tolerance: 1e-9,
            on_inconsistency: ConsistencyPolicy::Warn,
            loss_kind: LossKind::CrossEntropy,
            randomize_ids: false,
            checkpoint_dir: None,
            record_gradients: false,
        }
    }
}

impl TlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// One batch's reports combined into batch-ordered matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBatch {
    pub batch_id: u32,
    pub first_layer_activations: Matrix,
    pub last_layer_delta: Matrix,
    pub node_first_layer_grads: Matrix,
    pub layer1_weight_grad: Matrix,
    pub layer1_bias_grad: Vec<f64>,
    pub loss: f64,
    /// Batch positions contributed by each node, ascending node id.
    pub node_positions: Vec<(u32, Vec<usize>)>,
}

impl AssembledBatch {
    pub fn batch_size(&self) -> usize {
        self.first_layer_activations.rows()
    }
}

/// Scatters report rows into a `batch_size`-row batch. Layer-1 gradients and losses
/// are summed in ascending node-id order so the result does not depend on arrival
/// order.
pub fn assemble_batch(reports: &[NodeReport], batch_size: usize, aggregation: Aggregation) -> Result<AssembledBatch> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Integrity("no reports to assemble".into()))?;
    let batch_id = first.batch_id;
    if let Some(r) = reports.iter().find(|r| r.batch_id != batch_id) {
        return Err(Error::Integrity(format!(
            "report from node {} is for batch {}, expected {batch_id}",
            r.node_id, r.batch_id
        )));
    }
    let mut sorted: Vec<&NodeReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.node_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].node_id == w[1].node_id) {
        return Err(Error::Integrity(format!(
            "node {} reported twice for batch {batch_id}",
            w[0].node_id
        )));
    }
    let b = batch_size;
    let width = first.first_layer_activations.cols();
    let grad_width = first.first_layer_grads.cols();
    let out = first.last_layer_delta.cols();
    for r in &sorted {
        let shapes_ok = r.first_layer_activations.cols() == width
            && r.first_layer_grads.cols() == grad_width
            && r.last_layer_delta.cols() == out
            && r.layer1_weight_grad.shape() == first.layer1_weight_grad.shape();
        if !shapes_ok {
            return Err(Error::Integrity(format!(
                "node {} report shapes disagree with node {}",
                r.node_id, first.node_id
            )));
        }
    }

    let mut owner: Vec<Option<u32>> = vec![None; b];
    let mut overlaps = Vec::new();
    let mut out_of_range = Vec::new();
    for r in &sorted {
        for &p in &r.positions {
            match owner.get_mut(p) {
                None => out_of_range.push(p),
                Some(slot @ None) => *slot = Some(r.node_id),
                Some(Some(_)) => overlaps.push(p),
            }
        }
    }
    let gaps: Vec<usize> = owner
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.is_none().then_some(i))
        .collect();
    if !(gaps.is_empty() && overlaps.is_empty() && out_of_range.is_empty()) {
        return Err(Error::Integrity(format!(
            "batch {batch_id} positions do not partition 0..{b}: gaps {gaps:?}, overlaps {overlaps:?}, out of range {out_of_range:?}"
        )));
    }

    let n_nodes = sorted.len() as f64;
    let scale = |r: &NodeReport| match aggregation {
        Aggregation::PerSample => None,
        Aggregation::NodeMean => Some(b as f64 / (n_nodes * r.sample_count as f64)),
    };
    let mut x1 = Matrix::zeros(b, width);
    let mut grads = Matrix::zeros(b, grad_width);
    let mut delta = Matrix::zeros(b, out);
    let mut w1: Option<Matrix> = None;
    let mut b1: Option<Vec<f64>> = None;
    let mut loss = 0.0;
    let mut node_positions = Vec::with_capacity(sorted.len());
    for r in &sorted {
        let s = scale(r);
        let apply = |v: f64| s.map_or(v, |s| v * s);
        for (row, &p) in r.positions.iter().enumerate() {
            x1.row_mut(p).copy_from_slice(r.first_layer_activations.row(row));
            for (d, v) in grads.row_mut(p).iter_mut().zip(r.first_layer_grads.row(row)) {
                *d = apply(*v);
            }
            for (d, v) in delta.row_mut(p).iter_mut().zip(r.last_layer_delta.row(row)) {
                *d = apply(*v);
            }
        }
        let rw = match s {
            Some(s) => r.layer1_weight_grad.scale(s),
            None => r.layer1_weight_grad.clone(),
        };
        let rb: Vec<f64> = r.layer1_bias_grad.iter().map(|&v| apply(v)).collect();
        match (&mut w1, &mut b1) {
            (Some(w), Some(bias)) => {
                w.add_assign(&rw)?;
                for (acc, v) in bias.iter_mut().zip(&rb) {
                    *acc += v;
                }
                loss += apply(r.local_loss);
            }
            _ => {
                w1 = Some(rw);
                b1 = Some(rb);
                loss = apply(r.local_loss);
            }
        }
        node_positions.push((r.node_id, r.positions.clone()));
    }
    Ok(AssembledBatch {
        batch_id,
        first_layer_activations: x1,
        last_layer_delta: delta,
        node_first_layer_grads: grads,
        layer1_weight_grad: w1.expect("at least one report"),
        layer1_bias_grad: b1.expect("at least one report"),
        loss,
        node_positions,
    })
}

/// Forward pass from layer 2 on the assembled first-layer activations.
pub fn recalc_activations(model: &MlpModel, assembled: &AssembledBatch) -> Result<ForwardTrace> {
    let width = model.layers()[0].out_dim();
    if assembled.first_layer_activations.cols() != width {
        return Err(Error::dim(
            "assembled first-layer activations",
            (assembled.batch_size(), width),
            assembled.first_layer_activations.shape(),
        ));
    }
    forward_from(model, 1, &assembled.first_layer_activations)
}

/// Backward pass over layers L..2 from the assembled delta, with the layer-1
/// gradients taken from the node reports. `input_grad` holds the recomputed
/// `∂L/∂X⁽¹⁾`.
pub fn central_backward(model: &MlpModel, trace: &ForwardTrace, assembled: &AssembledBatch) -> Result<GradientSet> {
    let first = &model.layers()[0];
    if assembled.layer1_weight_grad.shape() != first.weights.shape() {
        return Err(Error::dim(
            "layer-1 weight gradient",
            first.weights.shape(),
            assembled.layer1_weight_grad.shape(),
        ));
    }
    if assembled.layer1_bias_grad.len() != first.biases.len() {
        return Err(Error::dim(
            "layer-1 bias gradient",
            (1, first.biases.len()),
            (1, assembled.layer1_bias_grad.len()),
        ));
    }
    if trace.start != 1 || trace.input.shape() != assembled.first_layer_activations.shape() {
        return Err(Error::Validation("trace was not recalculated from this batch".into()));
    }
    let mut weight_grads = vec![assembled.layer1_weight_grad.clone()];
    let mut bias_grads = vec![assembled.layer1_bias_grad.clone()];
    if model.depth() == 1 {
        if assembled.last_layer_delta.shape() != assembled.first_layer_activations.shape() {
            return Err(Error::dim(
                "last-layer delta",
                assembled.first_layer_activations.shape(),
                assembled.last_layer_delta.shape(),
            ));
        }
        return Ok(GradientSet {
            weight_grads,
            bias_grads,
            input_grad: Matrix::zeros(assembled.batch_size(), 0),
        });
    }
    let partial = backprop(model, trace, &assembled.last_layer_delta)?;
    let input_grad = partial.input_gradient(model)?;
    weight_grads.extend(partial.weight_grads);
    bias_grads.extend(partial.bias_grads);
    Ok(GradientSet {
        weight_grads,
        bias_grads,
        input_grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Compares node-reported and recomputed `∂L/∂X⁽¹⁾`. Non-finite entries fail.
pub fn consistency_check(node_grads: &Matrix, recomputed: &Matrix, tolerance: f64) -> Result<ConsistencyReport> {
    if node_grads.shape() != recomputed.shape() {
        return Err(Error::dim("consistency check", recomputed.shape(), node_grads.shape()));
    }
    let mut max_abs_diff: f64 = 0.0;
    for (a, b) in node_grads.data().iter().zip(recomputed.data()) {
        let d = (a - b).abs();
        if d.is_nan() {
            max_abs_diff = f64::INFINITY;
        } else {
            max_abs_diff = max_abs_diff.max(d);
        }
    }
    Ok(ConsistencyReport {
        max_abs_diff,
        pass: max_abs_diff <= tolerance,
    })
}

/// Largest first-layer gradient disagreement per node.
pub fn consistency_by_node(assembled: &AssembledBatch, recomputed: &Matrix) -> Vec<(u32, f64)> {
    assembled
        .node_positions
        .iter()
        .map(|(node, positions)| {
            let d = positions
                .iter()
                .flat_map(|&p| {
                    assembled
                        .node_first_layer_grads
                        .row(p)
                        .iter()
                        .zip(recomputed.row(p))
                        .map(|(a, b)| (a - b).abs())
                })
                .fold(0.0, f64::max);
            (*node, d)
        })
        .collect()
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: u32,
    pub loss: f64,
    pub consistency_max_diff: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch_id: u32,
    pub global_ids: Vec<usize>,
    pub gradients: GradientSet,
}

#[derive(Debug, Clone)]
pub struct TlOutcome {
    pub model: MlpModel,
    pub metrics: Vec<BatchMetrics>,
    pub records: Vec<BatchRecord>,
}

fn with_batch(e: Error, batch: u32) -> Error {
    match e {
        Error::Transport {
            node,
            batch: None,
            message,
        } => Error::Transport {
            node,
            batch: Some(batch),
            message,
        },
        other => other,
    }
}

fn expect_from(msg: &Message, kind: MessageKind, node: Option<u32>) -> Result<()> {
    if msg.kind != kind || node.is_some_and(|n| n != msg.source) {
        return Err(Error::Transport {
            node: msg.source,
            batch: None,
            message: format!("expected {kind:?} from {node:?}, got {:?}", msg.kind),
        });
    }
    Ok(())
}

fn broadcast(transport: &mut dyn Transport, nodes: &[u32], model: &MlpModel) -> Result<()> {
    let bytes = model.to_bytes();
    for &n in nodes {
        transport.send(Message::new(MessageKind::ModelBroadcast, ORCHESTRATOR_ID, n, bytes.clone()))?;
    }
    for _ in nodes {
        let ack = transport.recv()?;
        expect_from(&ack, MessageKind::Ack, None)?;
    }
    Ok(())
}

fn decode_report(msg: &Message, batch_id: u32) -> Result<NodeReport> {
    expect_from(msg, MessageKind::NodeReportMsg, None)?;
    let report = NodeReport::from_bytes(&msg.payload).map_err(|e| Error::Transport {
        node: msg.source,
        batch: Some(batch_id),
        message: e.to_string(),
    })?;
    if report.node_id != msg.source || report.batch_id != batch_id {
        return Err(Error::Transport {
            node: msg.source,
            batch: Some(batch_id),
            message: format!(
                "report claims node {} batch {}",
                report.node_id, report.batch_id
            ),
        });
    }
    Ok(report)
}

/// Queries every node for its sample count.
pub fn query_index_ranges(transport: &mut dyn Transport) -> Result<Vec<IndexRangeReport>> {
    let nodes = transport.node_ids();
    let mut reports = Vec::with_capacity(nodes.len());
    for &n in &nodes {
        transport.send(Message::new(MessageKind::IndexRangeMsg, ORCHESTRATOR_ID, n, Vec::new()))?;
        let reply = transport.recv()?;
        expect_from(&reply, MessageKind::IndexRangeMsg, Some(n))?;
        reports.push(IndexRangeReport {
            node_id: n,
            sample_count: decode_index_range(&reply.payload).map_err(|e| Error::Transport {
                node: n,
                batch: None,
                message: e.to_string(),
            })?,
        });
    }
    collect_index_ranges(reports)
}

/// The full training loop over whatever transport connects the nodes.
pub fn train_tl(transport: &mut dyn Transport, layer_spec: &[LayerSpec], config: &TlConfig) -> Result<TlOutcome> {
    config.validate()?;
    let mut model = MlpModel::init(layer_spec, config.seed)?;
    let ranges = query_index_ranges(transport)?;
    let nodes: Vec<u32> = ranges.iter().map(|r| r.node_id).collect();
    let map = build_global_index(&ranges, config.randomize_ids, config.seed);
    broadcast(transport, &nodes, &model)?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut metrics = Vec::new();
    let mut records = Vec::new();
    for epoch in 0..config.epochs {
        let (batches, plan) = plan_epoch(&map, config.batch_size, config.seed, epoch)?;
        for (batch, batch_plan) in batches.iter().zip(&plan.batches) {
            let started = Instant::now();
            let id = batch_plan.batch_id;
            let assignment = |step: &crate::vbatch::TraversalStep| StepAssignment {
                batch_id: id,
                batch_size: batch_plan.batch_size,
                loss_kind: config.loss_kind,
                step: step.clone(),
            };
            let send = |transport: &mut dyn Transport, step| -> Result<()> {
                let a: StepAssignment = assignment(step);
                transport.send(Message::new(
                    MessageKind::StepAssignment,
                    ORCHESTRATOR_ID,
                    a.step.node_id,
                    a.to_bytes()?,
                ))
            };
            let mut reports = Vec::with_capacity(batch_plan.steps.len());
            match config.mode {
                ExecutionMode::Deterministic => {
                    for step in &batch_plan.steps {
                        send(transport, step).map_err(|e| with_batch(e, id))?;
                        let msg = transport.recv().map_err(|e| with_batch(e, id))?;
                        expect_from(&msg, MessageKind::NodeReportMsg, Some(step.node_id))
                            .map_err(|e| with_batch(e, id))?;
                        reports.push(decode_report(&msg, id)?);
                    }
                }
                ExecutionMode::Pipelined => {
                    for step in &batch_plan.steps {
                        send(transport, step).map_err(|e| with_batch(e, id))?;
                    }
                    for _ in &batch_plan.steps {
                        let msg = transport.recv().map_err(|e| with_batch(e, id))?;
                        reports.push(decode_report(&msg, id)?);
                    }
                }
            }

            let assembled = assemble_batch(&reports, batch_plan.batch_size, config.aggregation)?;
            let trace = recalc_activations(&model, &assembled)?;
            let grads = central_backward(&model, &trace, &assembled)?;
            let check = consistency_check(&assembled.node_first_layer_grads, &grads.input_grad, config.tolerance)?;
            if !check.pass {
                for (node, d) in consistency_by_node(&assembled, &grads.input_grad) {
                    if !(d <= config.tolerance) {
                        log::warn!(
                            "epoch {epoch} batch {id}: node {node} first-layer gradient off by {d:e}"
                        );
                    }
                }
                if config.on_inconsistency == ConsistencyPolicy::Abort {
                    return Err(Error::Consistency {
                        epoch,
                        batch: id,
                        max_abs_diff: check.max_abs_diff,
                        tolerance: config.tolerance,
                    });
                }
            }
            sgd_step_in_place(&mut model, &grads, config.learning_rate)?;
            broadcast(transport, &nodes, &model).map_err(|e| with_batch(e, id))?;
            log::debug!("epoch {epoch} batch {id}: loss {:.6}", assembled.loss);
            metrics.push(BatchMetrics {
                epoch,
                batch: id,
                loss: assembled.loss,
                consistency_max_diff: check.max_abs_diff,
                wall_ms: started.elapsed().as_secs_f64() * 1000.0,
            });
            if config.record_gradients {
                records.push(BatchRecord {
                    epoch,
                    batch_id: id,
                    global_ids: batch.global_ids.clone(),
                    gradients: grads,
                });
            }
        }
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::write(dir.join(format!("epoch-{epoch:04}.tlmd")), model.to_bytes())?;
        }
        log::info!("epoch {epoch} done");
    }
    Ok(TlOutcome {
        model,
        metrics,
        records,
    })
}
