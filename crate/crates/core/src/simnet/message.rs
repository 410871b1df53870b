//! Messages exchanged between the orchestrator and nodes, and the TLFR frame.
//!
//! Frame layout: `"TLFR"`, u8 kind, u32 source, u32 destination, u64 payload
//! length (all little-endian), payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{WireReader, WireWriter};

pub const FRAME_MAGIC: &[u8; 4] = b"TLFR";
pub const FRAME_HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8;
/// Address of the orchestrator in message headers.
pub const ORCHESTRATOR_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    ModelBroadcast,
    StepAssignment,
    NodeReportMsg,
    IndexRangeMsg,
    Ack,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::ModelBroadcast,
        MessageKind::StepAssignment,
        MessageKind::NodeReportMsg,
        MessageKind::IndexRangeMsg,
        MessageKind::Ack,
    ];

    pub fn tag(self) -> u8 {
        match self {
            MessageKind::ModelBroadcast => 0,
            MessageKind::StepAssignment => 1,
            MessageKind::NodeReportMsg => 2,
            MessageKind::IndexRangeMsg => 3,
            MessageKind::Ack => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown message kind {tag}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub source: u32,
    pub destination: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, source: u32, destination: u32, payload: Vec<u8>) -> Self {
        Self {
            kind,
            source,
            destination,
            payload,
        }
    }

    pub fn payload_size(&self) -> usize {
        self.payload.len()
    }

    pub fn frame_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode_frame(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.bytes(FRAME_MAGIC);
        w.u8(self.kind.tag());
        w.u32(self.source);
        w.u32(self.destination);
        w.u64(self.payload.len() as u64);
        w.bytes(&self.payload);
        w.finish()
    }

    pub fn decode_frame(bytes: &[u8]) -> Result<Self> {
        let mut r = WireReader::new(bytes, "frame");
        let (kind, source, destination, len) = read_header(&mut r)?;
        let len = usize::try_from(len).map_err(|_| Error::Format(format!("frame payload length {len} too large")))?;
        let payload = r.take(len)?.to_vec();
        r.finish()?;
        Ok(Self::new(kind, source, destination, payload))
    }

    /// Reads one frame from a stream.
    pub fn read_from(stream: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        stream.read_exact(&mut header)?;
        let mut r = WireReader::new(&header, "frame");
        let (kind, source, destination, len) = read_header(&mut r)?;
        let mut payload = Vec::new();
        stream.take(len).read_to_end(&mut payload)?;
        if payload.len() as u64 != len {
            return Err(Error::Format(format!(
                "frame truncated: payload of {len} bytes, stream ended after {}",
                payload.len()
            )));
        }
        Ok(Self::new(kind, source, destination, payload))
    }

    pub fn write_to(&self, stream: &mut impl Write) -> Result<()> {
        stream.write_all(&self.encode_frame())?;
        stream.flush()?;
        Ok(())
    }
}

fn read_header(r: &mut WireReader<'_>) -> Result<(MessageKind, u32, u32, u64)> {
    r.magic(FRAME_MAGIC)?;
    let kind = MessageKind::from_tag(r.u8()?)?;
    let source = r.u32()?;
    let destination = r.u32()?;
    let len = r.u64()?;
    Ok((kind, source, destination, len))
}
