//! Losses, optimizers, training loops and checkpoint persistence.

pub mod captioner;
pub mod checkpoint;
pub mod classify;
mod loss;
pub mod optim;
mod subset;

pub use captioner::{train_captioner, CaptionEpoch};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedArray};
pub use classify::finetune_classifier;
pub use loss::{cross_entropy, cross_entropy_with_grad};
pub use optim::{adam_step, AdamState, Optimizer, OptimizerKind};
pub use subset::subset_labels;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Every image contributes all four rotations per epoch.
    AllFour,
    /// Every image contributes one uniformly drawn rotation per epoch.
    RandomSingle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub label_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Multiplicative per-epoch learning-rate decay; 1.0 keeps it constant.
    pub lr_decay: f64,
    pub freeze_encoder_epochs: usize,
    pub rotation_mode: RotationMode,
}

impl std::str::FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::AllFour),
            "single" => Ok(Self::RandomSingle),
            other => Err(Error::Config(format!("rotation mode must be `all` or `single`, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for RotationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllFour => "all",
            Self::RandomSingle => "single",
        })
    }
}

impl TrainConfig {
    /// Rotation pretext defaults: 100 epochs, batch 32.
    pub fn pretext() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            ..Self::captioning()
        }
    }

    /// Caption fine-tuning defaults: 10 epochs, batch 64.
    pub fn captioning() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            label_fraction: 0.10,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: None,
            lr_decay: 1.0,
            freeze_encoder_epochs: 0,
            rotation_mode: RotationMode::AllFour,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction must be in (0, 1], got {}", self.label_fraction));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]".into());
        }
        Ok(())
    }

    pub(crate) fn epoch_learning_rate(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}
