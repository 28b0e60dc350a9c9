//! Dual-encoder convolutional denoiser for Monte Carlo renderings.
//!
//! - [`tensor`]: NCHW tensors and a reverse-mode tape with the operators the
//!   network needs.
//! - [`net`]: DEMC and its two ablations (SEMC, DEMCnoSN).
//! - [`data`]: PFM sample directories, gamma and z-score transforms, patches.
//! - [`synth`]: procedural scenes with noisy and converged renders.
//! - [`train`]: Adam, learning-rate schedule, checkpoints and the trainer.
//! - [`metrics`]: RelMSE, SSIM and evaluation tables.
//! - [`verify`]: finite-difference gradient checks.
//! - [`cli`]: the `demc` command.

pub mod cli;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
