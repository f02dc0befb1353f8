//! Universal user modeling over stitched cross-domain event sequences.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode tape, attention blocks, Adam.
//! - [`data`]: event schema, ingestion, stitching, trimming, windowing, batching.
//! - [`synthgen`]: seeded multi-domain log generator with latent intents.
//! - [`model`]: featurizer, the three encoder variants, pooling, target tower, heads.
//! - [`training`]: in-batch sampled softmax, multi-task loss, the training loop, checkpoints.
//! - [`evaluation`]: sampled-negative retrieval metrics.
//! - [`config`]: the run configuration file shared by all commands.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod synthgen;
pub mod training;

pub use error::{ErrorCategory, Result, UumError};
