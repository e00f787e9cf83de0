//! Exploration-aware fine-tuning toolkit.
//!
//! Perplexity scoring, Gaussian-guided selection of low-confidence correct
//! trajectories, selection of high-confidence incorrect ones, the combined
//! cross-entropy + unlikelihood objective with its closed-form gradients, and a
//! tabular toy language model for watching policy entropy during training.
//!
//! The numeric kernels are generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the common `f64` instantiations. Answer verification compares
//! numbers as exact rationals.

pub mod error;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod record;
pub mod sampler;
pub mod scalar;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ProbVector64 = metrics::ProbVector<f64>;
pub type ProbVector32 = metrics::ProbVector<f32>;
pub type Logits64 = objective::LogitVector<f64>;
pub type Logits32 = objective::LogitVector<f32>;
pub type TokenBatch64 = objective::TokenBatch<f64>;
pub type TokenBatch32 = objective::TokenBatch<f32>;
pub type ToyModel64 = toy::ToyModel<f64>;
pub type ToyModel32 = toy::ToyModel<f32>;
