//! Convolutional network engine for binary skin-lesion classification.
//!
//! Pure-Rust CPU tensors and layers, a seeded data pipeline, training with
//! Adam plus plateau and early-stopping callbacks, evaluation metrics and
//! Grad-CAM heatmaps.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelSpec};
pub use tensor::{Real, Tensor};
