//! Desk-scale Gaussian-splat avatar optimization.
//!
//! The pipeline couples a differentiable splat rasterizer with diffusion
//! guidance (interval score matching against a pluggable denoiser), a
//! hierarchical conditioning-embedding algebra, mesh-adherence regularizers,
//! and a perceptual expression loss backed by a small trainable classifier.
//! Everything is CPU-only and deterministic given seeds.

pub mod classifier;
pub mod embedding;
pub mod error;
pub mod guidance;
pub mod image_buf;
pub mod losses;
pub mod metrics;
pub mod rasterizer;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
