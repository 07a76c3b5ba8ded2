//! Uncertainty-aware contrastive distillation for class-incremental semantic
//! segmentation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors, stable softmax / log-sum-exp, cosine similarity.
//! - [`tasks`]: synthetic shape datasets, incremental schedules and splits.
//! - [`esm`]: pseudo-labels, extended semantic maps and extended probabilities.
//! - [`mining`]: anchor / contrast index sets and the chunked similarity kernel.
//! - [`losses`]: contrastive distillation (plain and uncertainty-weighted),
//!   MiB and PLOP losses, composites and finite differences.
//! - [`model`]: a per-patch MLP segmenter with hand-written backprop.
//! - [`harness`]: incremental training, evaluation, metrics and reports.

pub mod error;
pub mod esm;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod tasks;

pub use error::{Result, UcdError};
