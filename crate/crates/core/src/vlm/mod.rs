//! Vision-language extension: a frozen stub encoder whose patch features go
//! through a two-layer projector into the language model's embedding space,
//! ahead of the text tokens.

pub mod encoder;
pub mod image;
pub mod sequence;
pub mod train;

pub use encoder::{build_projector, init_projector, project, PatchFeatures, StubEncoder, VisionConfig};
pub use image::{tile_high_res, GridPolicy, Image, Tiling};
pub use sequence::{build_multimodal_input, MultimodalSequence, Span, SpanKind};
pub use train::{
    desk_vision, params_checksum, synthetic_fixtures, vlm_train_stage, Checksums, StageOutcome, VlmExample,
    VlmModel, VlmStage, VlmState, VlmTrainConfig,
};

use thiserror::Error;

use crate::model::{ArchiveError, ModelError};
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("image: {0}")]
    Image(String),
    #[error("{0}")]
    Config(String),
    #[error("frozen parameters changed: {0}")]
    FrozenDrift(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
