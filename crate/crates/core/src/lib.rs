//! Desk-scale motion cloning for video diffusion.
//!
//! A small pixel-space video denoiser with named temporal-attention blocks
//! is trained on procedurally generated clips. Sparse temporal-attention
//! snapshots extracted from a reference clip then steer fresh samples via an
//! energy gradient added to the noise prediction, so generated clips inherit
//! the reference motion without any motion-specific training.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod guidance;
pub mod kv;
pub mod metrics;
pub mod pgm;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
