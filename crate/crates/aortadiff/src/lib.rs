//! Multi-task conditional diffusion for contrast-free CT.
//!
//! Translates non-contrast CT (NCCT) slices into synthetic contrast-enhanced
//! (CECT) slices while jointly segmenting the aortic lumen through a shared
//! dual-head denoising U-Net. Ships with a deterministic phantom data
//! generator, a semi-supervised trainer, a background-preserving sampler,
//! and an evaluation suite with clinical AAA measurements.

pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod sampler;
pub mod schedule;
pub mod sdf;
pub mod tensorio;
pub mod trainer;
pub mod viz;

pub mod cli;

pub use error::{Error, Result};
