//! The transport interface and the in-process simulated network.

use std::collections::BTreeMap;

use super::clock::SimClock;
use super::message::{Message, MessageKind, ORCHESTRATOR_ID};
use super::round::LatencyModel;
use crate::error::{Error, Result};
use crate::node::{node_forward_report, NodeState, StepAssignment};
use crate::wire::{WireReader, WireWriter};

/// Orchestrator-side view of the network. `recv` returns the next reply addressed
/// to the orchestrator, in whatever order replies arrive.
pub trait Transport {
    fn node_ids(&self) -> Vec<u32>;
    fn send(&mut self, msg: Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

pub(crate) fn transport_error(node: u32, e: impl std::fmt::Display) -> Error {
    Error::Transport {
        node,
        batch: None,
        message: e.to_string(),
    }
}

/// Node-side message handling: installs models, answers index-range queries, and
/// runs step assignments.
pub fn serve(state: &mut NodeState, msg: &Message) -> Result<Message> {
    let (me, to) = (state.node_id, msg.source);
    let reply = |kind, payload| Message::new(kind, me, to, payload);
    match msg.kind {
        MessageKind::ModelBroadcast => {
            state.receive_model(&msg.payload)?;
            Ok(reply(MessageKind::Ack, Vec::new()))
        }
        MessageKind::IndexRangeMsg => {
            let mut w = WireWriter::new();
            w.len32(state.shard.dataset.len())?;
            Ok(reply(MessageKind::IndexRangeMsg, w.finish()))
        }
        MessageKind::StepAssignment => {
            let assignment = StepAssignment::from_bytes(&msg.payload)?;
            let report = node_forward_report(state, &assignment)?;
            Ok(reply(MessageKind::NodeReportMsg, report.to_bytes()?))
        }
        other => Err(Error::Validation(format!(
            "node {} cannot handle {other:?}",
            state.node_id
        ))),
    }
}

/// Decodes the payload of an index-range reply.
pub fn decode_index_range(payload: &[u8]) -> Result<usize> {
    let mut r = WireReader::new(payload, "index range");
    let n = r.u32()? as usize;
    r.finish()?;
    Ok(n)
}

/// Traffic counters for one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub messages: u64,
    pub bytes: u64,
}

/// In-process network. Nodes run synchronously inside `send`; their replies are
/// delivered through a [`SimClock`] using the latency model, so `recv` order
/// reflects simulated completion times.
pub struct SimTransport {
    nodes: BTreeMap<u32, NodeState>,
    latency: LatencyModel,
    clock: SimClock<Message>,
    node_free_at: BTreeMap<u32, f64>,
    transcript: Option<Vec<Vec<u8>>>,
    pub to_nodes: Traffic,
    pub to_orchestrator: Traffic,
}

impl SimTransport {
    pub fn new(nodes: Vec<NodeState>, latency: LatencyModel) -> Result<Self> {
        let mut map = BTreeMap::new();
        for n in nodes {
            let id = n.node_id;
            if id == ORCHESTRATOR_ID || map.insert(id, n).is_some() {
                return Err(Error::Config(format!("duplicate or reserved node id {id}")));
            }
        }
        Ok(Self {
            node_free_at: map.keys().map(|&k| (k, 0.0)).collect(),
            nodes: map,
            latency,
            clock: SimClock::new(),
            transcript: None,
            to_nodes: Traffic::default(),
            to_orchestrator: Traffic::default(),
        })
    }

    /// Keeps the frame bytes of every orchestrator-bound message.
    pub fn record_transcript(mut self) -> Self {
        self.transcript = Some(Vec::new());
        self
    }

    pub fn transcript(&self) -> Option<&[Vec<u8>]> {
        self.transcript.as_deref()
    }

    pub fn node(&self, id: u32) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    /// Lets tests tamper with a node between batches.
    pub fn node_mut(&mut self, id: u32) -> Option<&mut NodeState> {
        self.nodes.get_mut(&id)
    }

    /// Simulated time in milliseconds.
    pub fn now_ms(&self) -> f64 {
        self.clock.now()
    }
}

impl Transport for SimTransport {
    fn node_ids(&self) -> Vec<u32> {
        self.nodes.keys().copied().collect()
    }

    fn send(&mut self, msg: Message) -> Result<()> {
        let dest = msg.destination;
        let frame = msg.encode_frame();
        self.to_nodes.messages += 1;
        self.to_nodes.bytes += frame.len() as u64;
        let msg = Message::decode_frame(&frame).map_err(|e| transport_error(dest, e))?;
        let state = self
            .nodes
            .get_mut(&dest)
            .ok_or_else(|| transport_error(dest, "no such node"))?;
        let arrival = self.clock.now() + self.latency.transfer_ms(frame.len());
        let start = arrival.max(self.node_free_at[&dest]);
        let compute = match msg.kind {
            MessageKind::StepAssignment => {
                let n = StepAssignment::from_bytes(&msg.payload)
                    .map(|a| a.step.local_indices.len())
                    .unwrap_or(0);
                self.latency.node_compute_ms(dest, n)
            }
            _ => 0.0,
        };
        let reply = serve(state, &msg).map_err(|e| transport_error(dest, e))?;
        let done = start + compute;
        self.node_free_at.insert(dest, done);
        let delivered = done + self.latency.transfer_ms(reply.frame_len());
        self.clock.schedule(delivered, reply);
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        let (_, msg) = self.clock.pop().ok_or_else(|| Error::Transport {
            node: ORCHESTRATOR_ID,
            batch: None,
            message: "recv with no message in flight".into(),
        })?;
        let frame = msg.encode_frame();
        self.to_orchestrator.messages += 1;
        self.to_orchestrator.bytes += frame.len() as u64;
        if let Some(t) = self.transcript.as_mut() {
            t.push(frame);
        }
        Ok(msg)
    }
}
