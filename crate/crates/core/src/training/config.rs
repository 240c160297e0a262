use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Global rotation drawn uniformly from `[-max_yaw_deg, max_yaw_deg]`.
    pub max_yaw_deg: f64,
    /// Mirror about the x axis with probability one half.
    pub flip: bool,
    pub scale: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_yaw_deg: 45.0,
            flip: true,
            scale: [0.95, 1.05],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
    /// Share of source frames held out for validation (taken from the end of the dataset).
    pub val_fraction: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            enabled: true,
            patience: 5,
            min_delta: 1e-3,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    /// First epoch trained at the decayed rate.
    pub decay_epoch: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub alpha_sim: f64,
    pub alpha_agent: f64,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub early_stop: EarlyStopConfig,
    /// Permit adaptation without a pretrained checkpoint.
    pub allow_cold_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 0.1,
            decay_epoch: 15,
            batch_source: 2,
            batch_target: 2,
            alpha_sim: 1.0,
            alpha_agent: 1.0,
            epochs: 20,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            early_stop: EarlyStopConfig::default(),
            allow_cold_start: false,
        }
    }
}

impl TrainConfig {
    /// Step schedule: `lr` before `decay_epoch`, `lr * lr_decay` from then on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr * self.lr_decay
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("train.lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("train.lr_decay must lie in (0, 1]");
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return fail("train.batch_source and train.batch_target must be positive");
        }
        if !(self.alpha_sim >= 0.0 && self.alpha_agent >= 0.0) {
            return fail("train.alpha_sim and train.alpha_agent must be non-negative");
        }
        let a = &self.augment;
        if !(a.max_yaw_deg >= 0.0 && a.scale[0] > 0.0 && a.scale[0] <= a.scale[1]) {
            return fail("train.augment: need max_yaw_deg >= 0 and 0 < scale[0] <= scale[1]");
        }
        let e = &self.early_stop;
        if !(0.0..1.0).contains(&e.val_fraction) || e.min_delta < 0.0 {
            return fail("train.early_stop: val_fraction must lie in [0, 1) and min_delta >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Boxes scoring at least `tau` become pseudo-labels; `tau = 1` keeps none.
    pub tau: f64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    /// Also finetune on labelled source frames.
    pub mix_source: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            tau: 0.3,
            rounds: 3,
            epochs_per_round: 2,
            mix_source: false,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("selftrain.tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("selftrain.rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn keeps(&self, score: f64) -> bool {
        self.tau < 1.0 && score >= self.tau
    }
}

/// Width of the discriminator used by the naive sim/real baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaiveDiscConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for NaiveDiscConfig {
    fn default() -> Self {
        NaiveDiscConfig {
            hidden: 64,
            dropout: 0.5,
        }
    }
}
