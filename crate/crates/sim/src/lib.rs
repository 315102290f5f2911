//! Deterministic discrete-event simulator for the qkdnet stack: simulated
//! quantum links, message transport, host workloads and metrics.

pub mod event;
pub mod harness;
pub mod metrics;
pub mod qll;
pub mod scenario;
pub mod sim;
pub mod transport;

pub use scenario::Scenario;
pub use sim::{run, RunError, RunOptions, RunOutput};
