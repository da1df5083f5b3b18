use serde::{Deserialize, Serialize};

use crate::datakit::AugmentConfig;
use crate::error::{GlassError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub use_augmentation: bool,
    /// Fraction of training scenes held out for best-checkpoint selection.
    pub val_fraction: f64,
    /// Save a checkpoint every this many epochs; `0` saves only the best and last.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    pub deterministic: bool,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_initial: 1e-4,
            lr_after: 1e-5,
            lr_switch_epoch: 200,
            total_epochs: 300,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            augment: AugmentConfig::default(),
            use_augmentation: true,
            val_fraction: 0.1,
            checkpoint_every: 10,
            max_steps: None,
            deterministic: true,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GlassError::Config(m));
        if self.batch_size == 0 {
            return err("train.batch_size must be at least 1".into());
        }
        if self.total_epochs == 0 {
            return err("train.total_epochs must be at least 1".into());
        }
        if self.lr_switch_epoch >= self.total_epochs {
            return err(format!(
                "train.lr_switch_epoch ({}) must be below train.total_epochs ({})",
                self.lr_switch_epoch, self.total_epochs
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return err("train.lr_initial and train.lr_after must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return err("train.weight_decay and train.grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("train.val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.device != "cpu" {
            return err(format!("train.device `{}` is not available; only `cpu` is supported", self.device));
        }
        if self.use_augmentation {
            self.augment.validate()?;
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (zero-based): a single step down at the switch epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_switch_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_after
    }
}
