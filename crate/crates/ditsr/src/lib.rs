//! Desk-scale diffusion transformer for image super-resolution.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference gradient oracle.
//! - [`fourier`]: windowed 2-D DFTs, patch fold/unfold, pixel-to-frequency
//!   mapping and radial power spectra.
//! - [`blocks`]: the transformer block with shifted-window attention and the
//!   two time-conditioning mechanisms (channel-wise AdaLN and the
//!   frequency-domain AdaFM).
//! - [`arch`]: the full U-shaped denoiser with isotropic channel
//!   reallocation, plus parameter/FLOPs accounting.
//! - [`diffusion`]: the residual-shifting forward process, reverse posterior
//!   and the sampling loop.
//! - [`data`], [`train`], [`eval`]: toy dataset synthesis, training harness
//!   and evaluation/spectrum-trajectory analysis.

pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod gradcheck;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
