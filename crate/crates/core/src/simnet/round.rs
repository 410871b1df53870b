//! Discrete-event simulation of one TL epoch over a traversal plan.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::clock::SimClock;
use super::message::FRAME_HEADER_LEN;
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::vbatch::TraversalPlan;

/// Samples per millisecond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeRate {
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_latency_ms: f64,
    pub bandwidth_bytes_per_ms: f64,
    pub node_rate: NodeRate,
    #[serde(default)]
    pub node_overrides: BTreeMap<u32, NodeRate>,
    /// Samples per millisecond for the central backward pass.
    pub server_rate: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_latency_ms: 0.5,
            bandwidth_bytes_per_ms: 100_000.0,
            node_rate: NodeRate {
                forward: 100.0,
                backward: 200.0,
            },
            node_overrides: BTreeMap::new(),
            server_rate: 500.0,
        }
    }
}

impl LatencyModel {
    /// No latency, unlimited bandwidth, instantaneous compute.
    pub fn ideal() -> Self {
        Self {
            base_latency_ms: 0.0,
            bandwidth_bytes_per_ms: f64::INFINITY,
            node_rate: NodeRate {
                forward: f64::INFINITY,
                backward: f64::INFINITY,
            },
            node_overrides: BTreeMap::new(),
            server_rate: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = std::iter::once(&self.node_rate).chain(self.node_overrides.values());
        let mut ok = self.base_latency_ms >= 0.0 && self.bandwidth_bytes_per_ms > 0.0 && self.server_rate > 0.0;
        for r in rates {
            ok &= r.forward > 0.0 && r.backward > 0.0;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "latency model needs latency >= 0 and positive bandwidth and rates".into(),
            ))
        }
    }

    pub fn transfer_ms(&self, bytes: usize) -> f64 {
        self.base_latency_ms + bytes as f64 / self.bandwidth_bytes_per_ms
    }

    /// Local forward plus local backward for `samples` rows.
    pub fn node_compute_ms(&self, node: u32, samples: usize) -> f64 {
        let r = self.node_overrides.get(&node).unwrap_or(&self.node_rate);
        samples as f64 / r.forward + samples as f64 / r.backward
    }

    pub fn server_ms(&self, samples: usize) -> f64 {
        samples as f64 / self.server_rate
    }
}

/// Encoded frame sizes, derived from the model shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageSizes {
    pub model_payload: usize,
    pub input_dim: usize,
    pub first_width: usize,
    pub output_dim: usize,
    pub depth: usize,
}

impl MessageSizes {
    pub fn for_model(model: &MlpModel) -> Self {
        let model_payload = 8 + model
            .layers()
            .iter()
            .map(|l| 9 + 8 * l.out_dim() * l.in_dim() + 8 * l.out_dim())
            .sum::<usize>();
        Self {
            model_payload,
            input_dim: model.input_dim(),
            first_width: model.layers()[0].out_dim(),
            output_dim: model.output_dim(),
            depth: model.depth(),
        }
    }

    pub fn model_frame(&self) -> usize {
        FRAME_HEADER_LEN + self.model_payload
    }

    pub fn assignment_frame(&self, samples: usize) -> usize {
        FRAME_HEADER_LEN + 21 + 8 * samples
    }

    pub fn report_frame(&self, samples: usize) -> usize {
        let w = self.first_width;
        let grad_cols = if self.depth >= 2 { w } else { 0 };
        FRAME_HEADER_LEN
            + 16
            + 4 * samples
            + (8 + 8 * samples * w)
            + (8 + 8 * samples * grad_cols)
            + (8 + 8 * samples * self.output_dim)
            + 8
            + (8 + 8 * w * self.input_dim)
            + (8 + 8 * w)
    }

    pub fn ack_frame(&self) -> usize {
        FRAME_HEADER_LEN
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundEvent {
    ModelArrives { node: u32, version: usize },
    AssignmentArrives { node: u32, batch: usize },
    ComputeDone { node: u32, batch: usize },
    ReportArrives { node: u32, batch: usize },
    BackwardDone { batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub total_ms: f64,
    pub events: Vec<(f64, RoundEvent)>,
}

impl RoundTrace {
    pub fn total_seconds(&self) -> f64 {
        self.total_ms / 1000.0
    }
}

#[derive(Default)]
struct NodeSim {
    /// Newest model version received; `None` until the initial broadcast lands.
    model_version: Option<usize>,
    busy: bool,
    queue: VecDeque<(usize, usize)>,
}

/// Simulates one epoch: initial broadcast, then per batch the step executions,
/// report transfers, central backward pass, and redistribution.
///
/// Without pipelining the steps of a batch run one after another in plan order and
/// a batch's assignments are only sent once the previous batch's update is done.
/// With pipelining all steps of a batch are dispatched at once, and the next
/// batch's assignments go out as soon as the current batch's reports are in, so
/// nodes can start as soon as the updated model lands.
pub fn simulate_round_trace(
    plan: &TraversalPlan,
    latency: &LatencyModel,
    sizes: &MessageSizes,
    node_ids: &[u32],
    pipelined: bool,
) -> Result<RoundTrace> {
    latency.validate()?;
    let mut nodes: BTreeMap<u32, NodeSim> = node_ids.iter().map(|&n| (n, NodeSim::default())).collect();
    for b in &plan.batches {
        if let Some(s) = b.steps.iter().find(|s| !nodes.contains_key(&s.node_id)) {
            return Err(Error::Integrity(format!(
                "plan visits node {} which is not in the node list",
                s.node_id
            )));
        }
    }
    let mut clock: SimClock<RoundEvent> = SimClock::new();
    let mut events = Vec::new();
    let model_ms = latency.transfer_ms(sizes.model_frame());
    for &n in node_ids {
        clock.schedule(model_ms, RoundEvent::ModelArrives { node: n, version: 0 });
    }
    let batches = &plan.batches;
    let mut reports_in = vec![0usize; batches.len()];
    let mut next_step = vec![0usize; batches.len()];
    let mut present = vec![false; batches.len()];

    let send_assignment = |clock: &mut SimClock<RoundEvent>, batch: usize, step: usize| {
        let s = &batches[batch].steps[step];
        let t = latency.transfer_ms(sizes.assignment_frame(s.local_indices.len()));
        clock.schedule_in(t, RoundEvent::AssignmentArrives { node: s.node_id, batch });
    };
    let dispatch = |clock: &mut SimClock<RoundEvent>, batch: usize, next_step: &mut [usize], present: &mut [bool]| {
        if batch >= batches.len() || present[batch] {
            return;
        }
        present[batch] = true;
        if pipelined {
            for s in 0..batches[batch].steps.len() {
                send_assignment(clock, batch, s);
            }
            next_step[batch] = batches[batch].steps.len();
        } else {
            send_assignment(clock, batch, 0);
            next_step[batch] = 1;
        }
    };
    dispatch(&mut clock, 0, &mut next_step, &mut present);

    let mut total: f64 = 0.0;
    while let Some((t, ev)) = clock.pop() {
        total = total.max(t);
        events.push((t, ev.clone()));
        let start_ready = |clock: &mut SimClock<RoundEvent>, node: u32, nodes: &mut BTreeMap<u32, NodeSim>| {
            let sim = nodes.get_mut(&node).expect("known node");
            if sim.busy {
                return;
            }
            if let Some(&(batch, samples)) = sim.queue.front() {
                if sim.model_version.is_some_and(|v| batch <= v) {
                    sim.queue.pop_front();
                    sim.busy = true;
                    clock.schedule_in(latency.node_compute_ms(node, samples), RoundEvent::ComputeDone { node, batch });
                }
            }
        };
        match ev {
            RoundEvent::ModelArrives { node, version } => {
                let sim = nodes.get_mut(&node).expect("known node");
                sim.model_version = sim.model_version.max(Some(version));
                start_ready(&mut clock, node, &mut nodes);
            }
            RoundEvent::AssignmentArrives { node, batch } => {
                let samples = batches[batch]
                    .steps
                    .iter()
                    .find(|s| s.node_id == node)
                    .map_or(0, |s| s.local_indices.len());
                nodes.get_mut(&node).expect("known node").queue.push_back((batch, samples));
                start_ready(&mut clock, node, &mut nodes);
            }
            RoundEvent::ComputeDone { node, batch } => {
                nodes.get_mut(&node).expect("known node").busy = false;
                let samples = batches[batch]
                    .steps
                    .iter()
                    .find(|s| s.node_id == node)
                    .map_or(0, |s| s.local_indices.len());
                clock.schedule_in(
                    latency.transfer_ms(sizes.report_frame(samples)),
                    RoundEvent::ReportArrives { node, batch },
                );
                start_ready(&mut clock, node, &mut nodes);
            }
            RoundEvent::ReportArrives { batch, .. } => {
                reports_in[batch] += 1;
                if reports_in[batch] == batches[batch].steps.len() {
                    if pipelined {
                        dispatch(&mut clock, batch + 1, &mut next_step, &mut present);
                    }
                    clock.schedule_in(
                        latency.server_ms(batches[batch].batch_size),
                        RoundEvent::BackwardDone { batch },
                    );
                } else if !pipelined {
                    send_assignment(&mut clock, batch, next_step[batch]);
                    next_step[batch] += 1;
                }
            }
            RoundEvent::BackwardDone { batch } => {
                for &n in node_ids {
                    clock.schedule_in(model_ms, RoundEvent::ModelArrives { node: n, version: batch + 1 });
                }
                dispatch(&mut clock, batch + 1, &mut next_step, &mut present);
            }
        }
    }
    Ok(RoundTrace { total_ms: total, events })
}

/// Simulated epoch time in seconds.
pub fn simulate_round(
    plan: &TraversalPlan,
    latency: &LatencyModel,
    sizes: &MessageSizes,
    node_ids: &[u32],
    pipelined: bool,
) -> Result<f64> {
    Ok(simulate_round_trace(plan, latency, sizes, node_ids, pipelined)?.total_seconds())
}
