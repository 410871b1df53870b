//! Traversal learning: forward propagation runs on the nodes that hold the data,
//! backward propagation runs centrally on an orchestrator, and the result matches
//! centralized training on the same batches.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod node;
pub mod simnet;
pub mod vbatch;
pub mod wire;

pub use error::{Error, Result};
pub use matrix::Matrix;
