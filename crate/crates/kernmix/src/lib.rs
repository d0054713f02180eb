//! Metric learning around a Gaussian-kernel neighbourhood classifier.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] / [`autodiff`]: dense f64 tensors and a minimal reverse-mode
//!   tape, with finite-difference gradient verification.
//! - [`kernel`]: the weighted Gaussian neighbourhood classifier over a bank
//!   of labelled centers, and its negative-log-likelihood training loss.
//! - [`mixup`]: convex input mixing with Beta-sampled coefficients and the
//!   matching interpolated cross-entropy.
//! - [`losses`]: the combined mixup + kernel objectives and the classical
//!   contrastive / triplet / soft-neighbourhood baselines.
//! - [`net`]: small trainable embedding backbones (an MLP and a tiny
//!   convnet) plus SGD with momentum and checkpointing.
//! - [`data`]: IDX image files, synthetic Gaussian blobs, and deterministic
//!   stratified splits for partially labelled training.
//! - [`harness`]: end-to-end training, evaluation, grid sweeps and metrics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod losses;
pub mod mixup;
pub mod net;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
