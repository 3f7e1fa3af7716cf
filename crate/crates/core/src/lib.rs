//! Federated stain distribution alignment for H&E histopathology.
//!
//! The pipeline has three parts:
//!
//! 1. [`stain`] factorizes each image into a 3x2 stain matrix and a
//!    per-pixel density map in optical-density space.
//! 2. [`fedsim`] trains a conditional [`diffusion`] model over the clients'
//!    stain matrices with weighted federated averaging; raw images never
//!    leave a client.
//! 3. [`align`] re-renders every client's images with stain matrices drawn
//!    from the other clients' distributions.
//!
//! [`metrics`] provides the Fréchet distance, 1-D Wasserstein distance and
//! SSIM used for evaluation, and [`ampnorm`] implements the Fourier
//! amplitude-normalization baseline.

pub mod align;
pub mod ampnorm;
pub mod diffusion;
mod error;
pub mod fedsim;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stain;

pub use error::{Error, Result};
