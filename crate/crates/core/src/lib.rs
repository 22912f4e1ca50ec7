//! Online surgical phase recognition with multi-scale temporal-action
//! features and dual-classifier sequence regularization.
//!
//! The numeric core ([`autograd`], [`msta`], [`losses`], [`model`]) is
//! generic over the [`Scalar`] type; the aliases below fix it to `f64`,
//! which the training pipeline and file formats use.

pub mod autograd;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msta;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used by the pipeline, checkpoints and datasets.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = autograd::Tape<Real>;
