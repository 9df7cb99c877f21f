use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamWParams;
use crate::preprocess::SnrParams;

/// Everything that determines a training run. Unset keys in a config file
/// keep these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of images used for training; the rest are held out.
    pub split: f64,
    pub stage_switch_epoch: usize,
    pub seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    /// Brightness level used by `enhance` when none is given.
    pub default_lambda: f64,
    pub loss_weights: LossWeights,
    pub denoiser: DenoiserConfig,
    pub snr: SnrParams,
    /// Pretrained perceptual extractor weights; the seeded offline extractor is used when unset.
    pub extractor_weights: Option<PathBuf>,
    pub extractor_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sched = ScheduleParams::default();
        Self {
            image_size: 64,
            batch_size: 8,
            epochs: 50,
            lr: 5e-5,
            weight_decay: 1e-4,
            split: 0.9,
            stage_switch_epoch: 20,
            seed: 0,
            timesteps: sched.timesteps,
            beta_start: sched.beta_start,
            beta_end: sched.beta_end,
            ddim_steps: 50,
            default_lambda: 0.55,
            loss_weights: LossWeights::default(),
            denoiser: DenoiserConfig::default(),
            snr: SnrParams::default(),
            extractor_weights: None,
            extractor_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Parses a TOML file over the defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn optimizer(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split must be in (0, 1), got {}", self.split)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.timesteps {
            return Err(Error::Config(format!(
                "ddim_steps must be in 1..={}, got {}",
                self.timesteps, self.ddim_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.default_lambda) {
            return Err(Error::Config("default_lambda must be in [0, 1]".into()));
        }
        self.denoiser.validate()?;
        let m = self.denoiser.size_multiple();
        if self.image_size < crate::imaging::MIN_SIDE || self.image_size % m != 0 {
            return Err(Error::Config(format!(
                "image_size must be >= {} and divisible by {m}, got {}",
                crate::imaging::MIN_SIDE,
                self.image_size
            )));
        }
        if self.image_size < crate::perceptual::MIN_INPUT_SIDE {
            return Err(Error::Config(format!(
                "image_size must be at least {} for the perceptual loss",
                crate::perceptual::MIN_INPUT_SIDE
            )));
        }
        self.loss_weights.validate()?;
        self.schedule().build()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.split, 0.9);
        assert_eq!(c.stage_switch_epoch, 20);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let c = TrainConfig::from_toml_str("epochs = 3\n[denoiser]\nbase_channels = 16\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.denoiser.base_channels, 16);
        assert_eq!(c.denoiser.channel_multipliers, vec![1, 2, 4]);
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml_str("split = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml_str("image_size = 30").is_err());
        assert!(TrainConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
