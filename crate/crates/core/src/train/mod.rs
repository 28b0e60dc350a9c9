//! Optimisation: RelMSE in the HDR domain, Adam, a geometric learning-rate
//! decay, the patch training loop and binary checkpoints.

mod adam;
mod checkpoint;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::net::NetError;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use trainer::{load_split, mean_patch_loss, write_log_csv, LogRecord, PatchId, TrainSet, Trainer};

/// RelMSE stabiliser.
pub const LOSS_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint does not match the model: missing [{}], unexpected [{}]", missing.join(", "), unexpected.join(", "))]
    Mismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("non-finite loss {loss} at iteration {iteration}; batch: {}", batch.join(" "))]
    NonFinite {
        iteration: u64,
        loss: f64,
        batch: Vec<String>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_iterations: u64,
    pub batch_size: usize,
    pub eps_loss: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Share of manifest scenes held out for validation.
    pub validation_fraction: f64,
    /// 0 disables validation.
    pub validate_every: u64,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Synchronous loading; otherwise a prefetch thread assembles batches.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-4,
            lr_end: 5e-6,
            total_iterations: 250_000,
            batch_size: 8,
            eps_loss: LOSS_EPS,
            seed: 0,
            checkpoint_every: 5000,
            validation_fraction: 0.1,
            validate_every: 1000,
            patch_size: 128,
            patch_stride: 80,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return err(format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.total_iterations == 0 {
            return err("total_iterations must be at least 1".into());
        }
        if !(self.eps_loss > 0.0) {
            return err(format!("eps_loss must be positive, got {}", self.eps_loss));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err(format!("validation_fraction {} outside [0, 1)", self.validation_fraction));
        }
        if self.patch_size == 0 || self.patch_size % crate::net::RESOLUTION_MULTIPLE != 0 {
            return err(format!("patch_size {} must be a positive multiple of 32", self.patch_size));
        }
        if self.patch_stride == 0 {
            return err("patch_stride must be positive".into());
        }
        Ok(())
    }
}

/// `lr_start · (lr_end / lr_start)^(iter / total)`, clamped to `[0, total]`.
pub fn lr_schedule(iter: u64, config: &TrainConfig) -> f64 {
    let total = config.total_iterations.max(1);
    let t = iter.min(total) as f64 / total as f64;
    config.lr_start * (config.lr_end / config.lr_start).powf(t)
}

/// Appends the HDR-domain loss: `pred_gamma^2.2` against `reference`.
pub fn relmse_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_gamma: Var,
    reference: &Tensor<T>,
    eps: f64,
) -> Result<Var, TensorError> {
    let hdr = g.pow(pred_gamma, T::from_f64_lossy(2.2));
    g.relmse(hdr, reference, T::from_f64_lossy(eps))
}
