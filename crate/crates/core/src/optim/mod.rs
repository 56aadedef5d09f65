//! AdamW, token-indexed schedules and loss-spike detection.

mod adamw;
mod schedule;
mod spike;

pub use adamw::{adamw_step, AdamState, OptimizerConfig};
pub use schedule::{noise_temperature, BatchSchedule, EpsSchedule, LrSchedule, GT};
pub use spike::{median, spike_detect, SpikeEvent, SpikeKind, SpikePolicy};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("optimizer config: {0}")]
    Config(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    Shape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}
