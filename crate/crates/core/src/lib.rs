//! Ghost-imaging toolkit: structured-illumination acquisition simulation,
//! classical and self-supervised learned reconstruction, and quantitative
//! evaluation.
//!
//! The crate is organized bottom-up:
//!
//! * [`rng`] — pinned, documented PRNG so every randomized result is
//!   reproducible from (seed, stream)
//! * [`tensor`] — reverse-mode autodiff over dense tensors
//! * [`acquisition`] — phantoms, illumination masks, bucket measurements,
//!   Poisson photon noise, pencil-beam reference scans
//! * [`linear`] — CGLS least-squares reconstruction and the realization
//!   split/permutation bookkeeping
//! * [`variational`] — TV-regularized reconstruction (primal-dual)
//! * [`models`] — U-Net, DnCNN-style chain, and sinusoidal INR built on the
//!   tape
//! * [`engines`] — self-supervised training loops (GIDC, Noise2Inverse,
//!   Noise2Ghost), cross-validation, and diagnostics
//! * [`metrics`] — MSE/PSNR/SSIM and Fourier ring correlation
//! * [`container`] — the GITK array container used for on-disk exchange

pub mod acquisition;
pub mod container;
pub mod engines;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod linear;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod variational;

pub use error::{GhostError, Result};
pub use image::Image;
