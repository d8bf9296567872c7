//! Transformer-based incremental semantic segmentation.
//!
//! The crate is organized around the pieces of an incremental run:
//!
//! * [`protocol`]: label spaces, task schedules, disjoint/overlapped splits, toy data.
//! * [`model`]: a small ViT encoder with a linear decoder, head growth, checkpoints.
//! * [`losses`]: unbiased CE/KD, patch distillation, absolute-cosine statistics,
//!   patch-wise contrastive losses and the weighted total.
//! * [`trainer`]: SGD with polynomial decay over the incremental steps.
//! * [`metrics`]: confusion matrices and grouped mIoU tables.
//! * [`diagnostics`]: similarity profiles across steps and feature-map exports.
//! * [`cli`]: the `tiss-kit` command line.

pub mod cli;
pub mod diagnostics;
mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod protocol;
mod real;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

/// Per-pixel class indices. `255` marks ignored pixels.
pub type LabelGrid = ndarray::Array2<u8>;

/// RGB image as `[height, width, 3]` with channel values in `[0, 1]`.
pub type RgbImage = ndarray::Array3<f32>;
