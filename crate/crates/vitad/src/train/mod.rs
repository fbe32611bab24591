//! Optimizer, learning-rate schedule, the pooled multi-class training loop
//! and the evaluation protocol.

mod adamw;
mod evaluate;
mod trainer;

pub use adamw::{AdamW, AdamWParams};
pub use evaluate::{evaluate, EvalConfig, Evaluation, ImageOutcome, TestSet};
pub use trainer::{eval_epochs, train, write_checkpoints, EvalRecord, Progress, RunManifest, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::scoring::{LossKind, DEFAULT_STAGES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Constant, multiplied once by `lr_drop_factor` at `lr_drop_epoch`.
    /// A drop epoch past the end of the run never fires.
    #[default]
    Step,
    /// Half-cosine decay from `lr` to zero over all epochs.
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Step => "step",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Schedule::Step),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::config(format!("unknown schedule {other:?}; expected step or cosine"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub schedule: Schedule,
    /// Number of evenly spaced evaluations during the run.
    pub eval_points: usize,
    pub loss: LossKind,
    pub constrained_stages: Vec<usize>,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Encode each training image once and reuse the features. Ignored
    /// when augmentation is on.
    pub cache_features: bool,
    /// Re-hash the encoder after every step and fail if it changed.
    pub verify_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 100,
            lr_drop_epoch: 80,
            lr_drop_factor: 0.1,
            schedule: Schedule::Step,
            eval_points: 10,
            loss: LossKind::CosineFlat,
            constrained_stages: DEFAULT_STAGES.to_vec(),
            seed: 0,
            augment: AugmentConfig::default(),
            cache_features: true,
            verify_frozen: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::config("train.lr_drop_factor must be in (0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be at least 1"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("AdamW needs weight_decay >= 0 and betas in [0, 1)"));
        }
        if self.constrained_stages.is_empty() {
            return Err(Error::config("train.constrained_stages is empty"));
        }
        Ok(())
    }

    pub fn adamw(&self, lr: f64) -> AdamWParams {
        AdamWParams {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Learning rate used throughout epoch `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Step if epoch < cfg.lr_drop_epoch => cfg.lr,
        Schedule::Step => cfg.lr * cfg.lr_drop_factor,
        Schedule::Cosine => {
            let t = epoch as f64 / cfg.epochs.max(1) as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}
