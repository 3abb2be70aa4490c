//! Soft-routed mixture of low-rank adapters over a frozen sequence model.
//!
//! The crate provides:
//! - [`moe`]: low-rank experts blended by a per-token soft router on top of
//!   frozen base projections;
//! - [`model`]: a small decoder-only sequence model with adapted projection
//!   sites and hand-rolled reverse-mode gradients;
//! - [`synth`]: a deterministic five-manifold translation corpus generator;
//! - [`filter`]: prompt-pool and quality-assurance filtering (duration, WER,
//!   pair conjunction);
//! - [`train`]: AdamW plus the two-stage recipe (per-manifold expert
//!   specialization, then router-only optimization);
//! - [`metrics`]: BLEU with bootstrap dispersion, cosine affect similarity,
//!   opinion-score aggregation, preference and match-accuracy statistics;
//! - [`analysis`]: routing traces, confusion matrices and alignment
//!   accuracy;
//! - [`checkpoint`]: bit-exact JSON tensor archives for models.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
