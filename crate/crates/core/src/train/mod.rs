//! Four-stage curriculum training at desk scale.

pub mod plan;
pub mod report;
pub mod runner;
pub mod state;
pub mod step;

pub use plan::{desk_model, CurriculumPlan, ResolvedStage, Scaling, StagePlan, SyntheticData, TrainKnobs};
pub use report::{Record, RunReport, ThroughputReport};
pub use runner::{rollback_and_skip, run_curriculum, Trainer};
pub use state::{checkpoint_dir, load_checkpoint, load_model, save_model, CheckpointStore, TrainState};
pub use step::{batch_gradients, perplexity, BatchGrads};

use thiserror::Error;

use crate::data::DataError;
use crate::model::{ArchiveError, ModelError};
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("plan: {0}")]
    Plan(String),
    #[error("stage {stage} ran out of data after {consumed} of {budget} tokens")]
    DataExhausted { stage: u8, consumed: u64, budget: u64 },
    #[error("no checkpoint to roll back to")]
    NoCheckpoint,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Plan and configuration problems as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Plan(_) | Self::Optim(OptimError::Config(_)) | Self::Model(ModelError::Config(_)) | Self::Data(DataError::Config(_))
        )
    }
}
