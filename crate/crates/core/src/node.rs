//! Node-side forward phase: run the local slice of a virtual batch through the full
//! model and report first-layer activations, first-layer gradients, and last-layer
//! deltas.

use crate::data::NodeShard;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{backprop, forward_full, loss_and_delta, one_hot, LossKind, MlpModel};
use crate::vbatch::{IndexRangeReport, TraversalStep};
use crate::wire::{WireReader, WireWriter};

pub const REPORT_MAGIC: &[u8; 4] = b"TLNR";
pub const ASSIGNMENT_MAGIC: &[u8; 4] = b"TLSA";

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: u32,
    pub shard: NodeShard,
    pub current_model: Option<MlpModel>,
}

impl NodeState {
    pub fn new(shard: NodeShard) -> Self {
        Self {
            node_id: shard.node_id,
            shard,
            current_model: None,
        }
    }

    pub fn index_range(&self) -> IndexRangeReport {
        IndexRangeReport {
            node_id: self.node_id,
            sample_count: self.shard.dataset.len(),
        }
    }

    /// Installs a model received as TLMD bytes.
    pub fn receive_model(&mut self, bytes: &[u8]) -> Result<()> {
        let model = MlpModel::from_bytes(bytes)?;
        if model.input_dim() != self.shard.dataset.feature_count() {
            return Err(Error::dim(
                format!("node {} model input", self.node_id),
                (1, self.shard.dataset.feature_count()),
                (1, model.input_dim()),
            ));
        }
        self.current_model = Some(model);
        Ok(())
    }

    /// TLMD bytes of the installed model, if any.
    pub fn model_bytes(&self) -> Option<Vec<u8>> {
        self.current_model.as_ref().map(MlpModel::to_bytes)
    }
}

/// What the orchestrator asks a node to compute for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAssignment {
    pub batch_id: u32,
    /// Full virtual batch size, the loss denominator.
    pub batch_size: usize,
    pub loss_kind: LossKind,
    pub step: TraversalStep,
}

impl StepAssignment {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = WireWriter::new();
        w.bytes(ASSIGNMENT_MAGIC);
        w.u32(self.step.node_id);
        w.u32(self.batch_id);
        w.len32(self.batch_size)?;
        w.u8(self.loss_kind.tag());
        w.len32(self.step.local_indices.len())?;
        for &i in &self.step.local_indices {
            w.len32(i)?;
        }
        for &p in &self.step.positions {
            w.len32(p)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WireReader::new(bytes, "step assignment");
        r.magic(ASSIGNMENT_MAGIC)?;
        let node_id = r.u32()?;
        let batch_id = r.u32()?;
        let batch_size = r.u32()? as usize;
        let loss_kind = LossKind::from_tag(r.u8()?)?;
        let n = r.u32()? as usize;
        let local_indices = r.u32s(n)?.into_iter().map(|v| v as usize).collect();
        let positions = r.u32s(n)?.into_iter().map(|v| v as usize).collect();
        r.finish()?;
        Ok(Self {
            batch_id,
            batch_size,
            loss_kind,
            step: TraversalStep {
                node_id,
                local_indices,
                positions,
            },
        })
    }
}

/// A node's per-batch transmission. Carries no raw features and no labels.
///
/// Besides the activations and deltas, the node ships its layer-1 parameter
/// gradients summed over its rows, because the orchestrator cannot form them
/// without the raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub node_id: u32,
    pub batch_id: u32,
    pub positions: Vec<usize>,
    pub sample_count: usize,
    pub first_layer_activations: Matrix,
    /// `∂L/∂X⁽¹⁾` for this node's rows (`n × 0` for a single-layer model).
    pub first_layer_grads: Matrix,
    pub last_layer_delta: Matrix,
    pub local_loss: f64,
    pub layer1_weight_grad: Matrix,
    pub layer1_bias_grad: Vec<f64>,
}

impl NodeReport {
    fn validate(&self) -> Result<()> {
        let n = self.sample_count;
        if self.positions.len() != n {
            return Err(Error::Format(format!(
                "report has {} positions for {n} samples",
                self.positions.len()
            )));
        }
        for (name, m) in [
            ("first-layer activations", &self.first_layer_activations),
            ("first-layer gradients", &self.first_layer_grads),
            ("last-layer delta", &self.last_layer_delta),
        ] {
            if m.rows() != n {
                return Err(Error::Format(format!("report {name} has {} rows for {n} samples", m.rows())));
            }
        }
        if self.layer1_weight_grad.rows() != self.layer1_bias_grad.len() {
            return Err(Error::Format(format!(
                "layer-1 weight gradient has {} rows, bias gradient {}",
                self.layer1_weight_grad.rows(),
                self.layer1_bias_grad.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = WireWriter::new();
        w.bytes(REPORT_MAGIC);
        w.u32(self.node_id);
        w.u32(self.batch_id);
        w.len32(self.sample_count)?;
        for &p in &self.positions {
            w.len32(p)?;
        }
        w.matrix(&self.first_layer_activations)?;
        w.matrix(&self.first_layer_grads)?;
        w.matrix(&self.last_layer_delta)?;
        w.f64(self.local_loss);
        w.matrix(&self.layer1_weight_grad)?;
        let bias = Matrix::from_vec(1, self.layer1_bias_grad.len(), self.layer1_bias_grad.clone())?;
        w.matrix(&bias)?;
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WireReader::new(bytes, "node report");
        r.magic(REPORT_MAGIC)?;
        let node_id = r.u32()?;
        let batch_id = r.u32()?;
        let sample_count = r.u32()? as usize;
        let positions = r.u32s(sample_count)?.into_iter().map(|p| p as usize).collect();
        let first_layer_activations = r.matrix()?;
        let first_layer_grads = r.matrix()?;
        let last_layer_delta = r.matrix()?;
        let local_loss = r.f64()?;
        let layer1_weight_grad = r.matrix()?;
        let bias = r.matrix()?;
        r.finish()?;
        if bias.rows() != 1 {
            return Err(Error::Format(format!("bias gradient block has {} rows", bias.rows())));
        }
        let report = Self {
            node_id,
            batch_id,
            positions,
            sample_count,
            first_layer_activations,
            first_layer_grads,
            last_layer_delta,
            local_loss,
            layer1_weight_grad,
            layer1_bias_grad: bias.into_vec(),
        };
        report.validate()?;
        Ok(report)
    }
}

/// Forward pass over the step's rows, loss and delta with the full batch size as
/// denominator, and a local backward pass for `∂L/∂X⁽¹⁾` and the layer-1 gradients.
pub fn node_forward_report(state: &NodeState, assignment: &StepAssignment) -> Result<NodeReport> {
    let step = &assignment.step;
    if step.node_id != state.node_id {
        return Err(Error::Integrity(format!(
            "step for node {} delivered to node {}",
            step.node_id, state.node_id
        )));
    }
    if step.local_indices.len() != step.positions.len() || step.local_indices.is_empty() {
        return Err(Error::Integrity(format!(
            "node {} step has {} indices and {} positions",
            state.node_id,
            step.local_indices.len(),
            step.positions.len()
        )));
    }
    if assignment.batch_size < step.local_indices.len() {
        return Err(Error::Integrity(format!(
            "batch size {} smaller than node {} slice of {}",
            assignment.batch_size,
            state.node_id,
            step.local_indices.len()
        )));
    }
    let data = &state.shard.dataset;
    if let Some(&bad) = step.local_indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Integrity(format!(
            "node {} has {} samples, step asks for local index {bad}",
            state.node_id,
            data.len()
        )));
    }
    let model = state
        .current_model
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("node {} has no model", state.node_id)))?;
    if model.input_dim() != data.feature_count() {
        return Err(Error::dim(
            format!("node {} model input", state.node_id),
            (1, data.feature_count()),
            (1, model.input_dim()),
        ));
    }

    let x = data.features.select_rows(&step.local_indices);
    let labels: Vec<usize> = step.local_indices.iter().map(|&i| data.labels[i]).collect();
    let trace = forward_full(model, &x)?;
    let last = model.depth() - 1;
    // Both losses take one-hot targets.
    let y = one_hot(&labels, model.output_dim())?;
    let ld = loss_and_delta(
        trace.output(),
        &trace.pre_activations[last],
        model.output_activation(),
        &y,
        assignment.loss_kind,
        assignment.batch_size,
    )?;
    let grads = backprop(model, &trace, &ld.delta)?;
    let first_layer_grads = grads.first_layer_activation_grad(model)?;
    Ok(NodeReport {
        node_id: state.node_id,
        batch_id: assignment.batch_id,
        positions: step.positions.clone(),
        sample_count: step.local_indices.len(),
        first_layer_activations: trace.activations[0].clone(),
        first_layer_grads,
        last_layer_delta: ld.delta,
        local_loss: ld.loss,
        layer1_weight_grad: grads.weight_grads[0].clone(),
        layer1_bias_grad: grads.bias_grads[0].clone(),
    })
}
