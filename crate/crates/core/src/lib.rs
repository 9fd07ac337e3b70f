//! Uncertainty-aware radar place recognition.
//!
//! * [`scan_synth`]: synthetic landmark worlds, radar rendering and noise.
//! * [`model`]: variational encoder-decoder with invariant and variant latents.
//! * [`training`]: contrastive, KL and reconstruction losses with exact gradients.
//! * [`mapstore`]: uncertainty-driven parent map maintenance.
//! * [`query`]: exact k-NN retrieval with static-threshold query rejection.
//! * [`evalkit`]: Recall@N, AP, F-scores and Recall@RR sweeps.
//! * [`pipeline`] and [`bench`]: embedding sessions and the multi-traversal benchmark.
//! * [`cli`]: configuration and the pipeline subcommands.

pub mod bench;
pub mod cli;
pub mod error;
pub mod evalkit;
mod fsutil;
pub mod mapstore;
pub mod model;
pub mod pipeline;
pub mod query;
pub mod scalar;
pub mod scan_synth;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model weights, as stored in checkpoints.
pub type ModelParamsF32 = model::ModelParams<f32>;
/// Double-precision model weights used for training and gradient checks.
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type LatentOutputF64 = model::LatentOutput<f64>;
pub type EmbeddingF64 = model::Embedding<f64>;
pub type LossBreakdownF64 = training::LossBreakdown<f64>;
