//! Message transport (simulated and loopback TCP) and runtime cost models.

mod clock;
mod cost;
mod message;
mod round;
mod socket;
mod transport;

pub use clock::SimClock;
pub use cost::{estimate_runtime, simulate_method, CostMethod, CostParams};
pub use message::{Message, MessageKind, FRAME_HEADER_LEN, FRAME_MAGIC, ORCHESTRATOR_ID};
pub use round::{simulate_round, simulate_round_trace, LatencyModel, MessageSizes, NodeRate, RoundEvent, RoundTrace};
pub use socket::SocketTransport;
pub use transport::{decode_index_range, serve, SimTransport, Traffic, Transport};
