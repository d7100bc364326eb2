//! Joint multimodal image fusion and super-resolution with a conditional
//! denoising diffusion model.
//!
//! A low-resolution visible/infrared pair is fused and upscaled in one pass:
//! a bidirectional state-space encoder builds a joint representation of the
//! upsampled sources and the current noisy estimate, a small contrastive
//! encoder supplies a clarity-aware semantic vector, and a U-Net style
//! denoiser predicts the noise at each reverse step.

pub mod autograd;
pub mod bfm;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod clse;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod resample;
pub mod schedule;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
