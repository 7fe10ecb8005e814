//! Self-cascaded residual-shifting diffusion for arbitrary-scale image
//! super-resolution.
//!
//! A target magnification is split into fixed-factor stages plus a
//! remainder ([`plan`]); each stage runs a few-step residual-shifting
//! diffusion chain ([`diffusion`]) driven by one shared coordinate-conditioned
//! network ([`denoiser`]), and sampling nudges every clean estimate toward
//! the previous stage's output ([`guidance`], [`sampler`]).

pub mod base_sr;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod plan;
pub mod resample;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
