//! Run configuration.
//!
//! [`TrainConfig`] mirrors the JSON config file exactly; every field has a
//! default, so `{}` is a valid file. CLI flags override individual keys.

use crate::error::{Error, Result};
use crate::synth::CorpusConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Segmentation trunk shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    /// Number of stride-2 encoder stages.
    pub stages: usize,
    pub pyramid_bins: Vec<usize>,
    /// Channels of the fused full-resolution segmentation features.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_channels: 16,
            stages: 3,
            pyramid_bins: vec![1, 2, 3, 6],
            feature_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.stages == 0 || self.feature_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.pyramid_bins.is_empty() {
            return Err(Error::Config("pyramid needs at least one bin".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.stages
    }
}

/// Latent space and Monte Carlo sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Latent dimension L.
    pub latent_dim: usize,
    /// Monte Carlo sample count N.
    pub mc_samples: usize,
    /// Multiplies sigma before sampling; 0 collapses every draw onto the
    /// mean (test hook for identical-sample behavior).
    pub sigma_scale: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            latent_dim: 6,
            mc_samples: 4,
            sigma_scale: 1.0,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.mc_samples == 0 {
            return Err(Error::Config("latent_dim and mc_samples must be >= 1".into()));
        }
        if self.sigma_scale < 0.0 {
            return Err(Error::Config("sigma_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Feature recalibration shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecalibConfig {
    /// Channel count all taps are projected to.
    pub common_channels: usize,
    /// Common spatial size is the input image size divided by this.
    pub spatial_divisor: usize,
    /// Bottleneck width divisor of the channel-attention gate.
    pub squeeze_ratio: usize,
}

impl Default for RecalibConfig {
    fn default() -> Self {
        RecalibConfig {
            common_channels: 32,
            spatial_divisor: 4,
            squeeze_ratio: 4,
        }
    }
}

impl RecalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.common_channels == 0 || self.spatial_divisor == 0 || self.squeeze_ratio == 0 {
            return Err(Error::Config("recalibration dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Patch discriminator shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    /// Number of stride-2 conv blocks.
    pub layers: usize,
    pub base_width: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            layers: 3,
            base_width: 32,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator needs >= 1 layer and width".into()));
        }
        Ok(())
    }
}

/// Objective term weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_t: 0.1,
            lambda_d: 1.0,
            lambda_g: 0.003,
            lambda_kl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_t,
            self.lambda_d,
            self.lambda_g,
            self.lambda_kl,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Easy-to-hard self-training schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub f_start: f64,
    pub f_end: f64,
    pub total_epochs: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            f_start: 0.2,
            f_end: 0.8,
            total_epochs: 25,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.f_start && self.f_start <= self.f_end && self.f_end <= 1.0) {
            return Err(Error::Config(format!(
                "curriculum fractions ({}, {}) must satisfy 0 < start <= end <= 1",
                self.f_start, self.f_end
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("curriculum needs >= 1 epoch".into()));
        }
        Ok(())
    }
}

/// Component toggles for ablation runs. The full method enables all three;
/// adversarial alignment itself is controlled through `lambda_d`/`lambda_g`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Multi-scale attention recalibration in front of the discriminator;
    /// when off, the discriminator sees a plain projection of the deepest
    /// feature map only.
    pub use_frm: bool,
    /// Uncertainty weighting of the supervised source loss.
    pub use_uce: bool,
    /// Curriculum self-training on pseudo-labels.
    pub use_ust: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_frm: true,
            use_uce: true,
            use_ust: true,
        }
    }
}

/// Full run configuration; serializes 1:1 with the JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub phase1_iters: usize,
    pub phase1_lr: f64,
    pub phase2_iters: usize,
    pub phase2_lr: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Pretraining checkpoint cadence (iterations).
    pub checkpoint_every: usize,
    pub backbone: BackboneConfig,
    pub latent: LatentConfig,
    pub recalib: RecalibConfig,
    pub disc: DiscConfig,
    pub weights: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub ablation: AblationFlags,
    pub corpus: CorpusConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 17,
            n_classes: 3,
            phase1_iters: 3000,
            phase1_lr: 1e-3,
            phase2_iters: 2000,
            phase2_lr: 1e-4,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            checkpoint_every: 500,
            backbone: BackboneConfig::default(),
            latent: LatentConfig::default(),
            recalib: RecalibConfig::default(),
            disc: DiscConfig::default(),
            weights: LossWeights::default(),
            curriculum: CurriculumSchedule::default(),
            ablation: AblationFlags::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_iters == 0 || self.phase2_iters == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if self.phase1_lr <= 0.0 || self.phase2_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch_size = 1 is supported".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.backbone.validate()?;
        self.latent.validate()?;
        self.recalib.validate()?;
        self.disc.validate()?;
        self.weights.validate()?;
        self.curriculum.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Digest of the canonical JSON form; embedded in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        hasher.finalize().into()
    }

    /// Digest of the model-shape subset; a checkpoint can only be loaded
    /// into a model of the identical shape.
    pub fn shape_digest(&self) -> [u8; 32] {
        let shape = serde_json::json!({
            "n_classes": self.n_classes,
            "backbone": self.backbone,
            "latent": { "latent_dim": self.latent.latent_dim },
            "recalib": self.recalib,
            "disc": self.disc,
        });
        let mut hasher = Sha256::new();
        hasher.update(shape.to_string().as_bytes());
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg.latent.mc_samples, 4);
        assert_eq!(cfg.latent.latent_dim, 6);
        assert_eq!(cfg.weights.lambda_t, 0.1);
        assert_eq!(cfg.weights.lambda_g, 0.003);
        assert_eq!(cfg.phase1_iters, 3000);
        assert_eq!(cfg.phase2_iters, 2000);
        assert_eq!(cfg.batch_size, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_json("{\"nope\": 1}").is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn shape_digest_ignores_training_keys_but_not_shape() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        b.phase1_iters = 7;
        assert_eq!(a.shape_digest(), b.shape_digest());
        let mut c = TrainConfig::default();
        c.backbone.base_channels = 8;
        assert_ne!(a.shape_digest(), c.shape_digest());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.weights.lambda_s = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.curriculum.f_start = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 2;
        assert!(cfg.validate().is_err());
    }
}
