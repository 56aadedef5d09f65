//! Desk-scale staged-curriculum language model training.
//!
//! Modules:
//! - [`tensor`]: dense tensors and reverse-mode autodiff.
//! - [`model`]: parallel-block transformer with grouped-query attention and RoPE.
//! - [`optim`]: AdamW, learning-rate/batch-size schedules and spike handling.
//! - [`data`]: conversation flattening, quality filters, packing and mixtures.
//! - [`train`]: the four-stage curriculum, checkpoints and run reports.
//! - [`vlm`]: vision-language extension with a frozen stub encoder.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod model;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;
pub mod vlm;
