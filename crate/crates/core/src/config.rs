//! Watermarking configuration, stored as a flat TOML key/value document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatermarkConfig {
    /// Message length in bits.
    pub k: usize,
    /// Spatial size of the per-stage noise block.
    #[serde(rename = "B")]
    pub block_size: usize,
    /// Channel count at each decoder tap point, coarse to fine.
    pub stage_channels: Vec<usize>,
    pub downsample_factor: usize,
    #[serde(rename = "lambda_I")]
    pub lambda_i: f64,
    #[serde(rename = "lambda_LPIPS")]
    pub lambda_lpips: f64,
    pub lambda_adv: f64,
    /// Weight of the extraction loss in the total loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Clean bit accuracy at which attack sampling switches on.
    pub attack_threshold: f64,
    pub seed: u64,

    /// Training/evaluation image side in pixels.
    pub image_size: usize,
    /// Extractor input resolution R.
    pub extractor_resolution: usize,
    pub extractor_width: usize,
    pub critic_learning_rate: f64,
    pub gradient_penalty: f64,
    /// Number of images per epoch drawn from the synthetic corpus.
    pub dataset_size: usize,
    /// Window (in steps) of the running clean bit accuracy used by the gate.
    pub gate_window: usize,
    /// Hard cap on optimizer steps (0 = epochs × dataset_size / batch_size).
    pub max_steps: usize,
    /// Once attacks are active, probability that a step re-encodes the
    /// watermarked batch through the frozen autoencoder instead of sampling
    /// from the attack list.
    pub reencode_prob: f64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            k: 48,
            block_size: 8,
            stage_channels: vec![64, 48, 32, 16],
            downsample_factor: 8,
            lambda_i: 0.1,
            lambda_lpips: 1.0,
            lambda_adv: 1.0,
            lambda: 2.0,
            learning_rate: 6e-5,
            epochs: 40,
            batch_size: 8,
            attack_threshold: 0.75,
            seed: 0,
            image_size: 64,
            extractor_resolution: 64,
            extractor_width: 32,
            critic_learning_rate: 1e-4,
            gradient_penalty: 10.0,
            dataset_size: 5000,
            gate_window: 50,
            max_steps: 0,
            reencode_prob: 0.0,
        }
    }
}

impl WatermarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.block_size < 1 {
            return bad("B must be at least 1".into());
        }
        if ![4, 8, 16, 32].contains(&self.downsample_factor) {
            return bad(format!(
                "downsample_factor must be one of 4, 8, 16, 32 (got {})",
                self.downsample_factor
            ));
        }
        for (name, v) in [
            ("lambda_I", self.lambda_i),
            ("lambda_LPIPS", self.lambda_lpips),
            ("lambda_adv", self.lambda_adv),
            ("lambda", self.lambda),
            ("gradient_penalty", self.gradient_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0 (got {v})"));
            }
        }
        let ups = self.downsample_factor.trailing_zeros() as usize;
        if self.stage_channels.len() != ups && self.stage_channels.len() != ups + 1 {
            return bad(format!(
                "stage_channels has {} entries; f={} allows {} or {} tap points",
                self.stage_channels.len(),
                self.downsample_factor,
                ups,
                ups + 1
            ));
        }
        if self.stage_channels.contains(&0) {
            return bad("stage_channels entries must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.dataset_size == 0 {
            return bad("batch_size, epochs and dataset_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.reencode_prob) {
            return bad(format!("reencode_prob must lie in [0, 1] (got {})", self.reencode_prob));
        }
        if !(0.0..=1.0).contains(&self.attack_threshold) {
            return bad(format!(
                "attack_threshold must lie in [0, 1] (got {})",
                self.attack_threshold
            ));
        }
        if self.image_size % self.downsample_factor != 0 {
            return bad(format!(
                "image_size {} is not divisible by downsample_factor {}",
                self.image_size, self.downsample_factor
            ));
        }
        if self.extractor_resolution < 16 || self.gate_window == 0 {
            return bad("extractor_resolution must be >= 16 and gate_window >= 1".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.epochs * self.dataset_size.div_ceil(self.batch_size)
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size.div_ceil(self.batch_size)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}
