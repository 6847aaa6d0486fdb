//! Run configuration: a flat `key = value` TOML file. Every key is optional
//! and an empty file yields the reference training setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result, TasError};
use crate::losses::LossWeights;
use crate::model::{BackboneKind, ModelConfig};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasConfig {
    pub seed: u64,

    /// Frames sampled per segment.
    pub segment_length: usize,
    /// Mixup Beta(alpha, alpha) parameter.
    pub alpha: f64,
    pub lambda_rank: f64,
    pub lambda_spd: f64,
    pub lambda_sub: f64,
    pub use_rank: bool,
    pub use_spd: bool,
    pub use_sub: bool,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Fraction of training segments held out for early stopping.
    pub val_fraction: f64,
    pub eval_batch_size: usize,

    pub backbone: BackboneKind,
    /// Optional safetensors file with `backbone.*` tensors.
    pub pretrained_backbone: Option<PathBuf>,
    pub attention_kernel: usize,
    pub mlp_hidden: usize,
    pub leaky_slope: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],

    pub annotations_dir: Option<PathBuf>,
    pub frames_dir: Option<PathBuf>,

    pub synth_subjects: usize,
    pub synth_sequences: usize,
    pub synth_frames: usize,
    pub synth_aus: usize,
    pub synth_cooccurrence: f64,
    pub synth_subject_correlation: f64,
    pub synth_min_span: usize,
}

impl Default for TasConfig {
    fn default() -> Self {
        let weights = LossWeights::default();
        let model = ModelConfig::new(1, BackboneKind::Resnet34);
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            segment_length: 16,
            alpha: 0.5,
            lambda_rank: weights.lambda_rank,
            lambda_spd: weights.lambda_spd,
            lambda_sub: weights.lambda_sub,
            use_rank: true,
            use_spd: true,
            use_sub: true,
            batch_size: 16,
            learning_rate: 0.005,
            weight_decay: 0.0005,
            momentum: 0.0,
            epochs: 20,
            patience: 5,
            val_fraction: 0.1,
            eval_batch_size: 32,
            backbone: BackboneKind::Resnet34,
            pretrained_backbone: None,
            attention_kernel: model.attention_kernel,
            mlp_hidden: model.mlp_hidden,
            leaky_slope: model.leaky_slope,
            pixel_mean: model.pixel_mean,
            pixel_std: model.pixel_std,
            annotations_dir: None,
            frames_dir: None,
            synth_subjects: synth.n_subjects,
            synth_sequences: synth.n_sequences,
            synth_frames: synth.frame_count,
            synth_aus: synth.au_count,
            synth_cooccurrence: synth.cooccurrence,
            synth_subject_correlation: synth.subject_correlation,
            synth_min_span: synth.min_span,
        }
    }
}

impl TasConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).map_err(|e| TasError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TasError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TasError::Config(m));
        if self.segment_length < 2 {
            return err(format!("segment_length {} must be at least 2", self.segment_length));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha {} must be positive", self.alpha));
        }
        self.loss_weights().validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return err("batch sizes must be positive".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return err("learning_rate must be positive, weight_decay non-negative, momentum in [0,1)".into());
        }
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("val_fraction {} outside [0,1)", self.val_fraction));
        }
        Ok(())
    }

    /// Loss weights with disabled terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_rank: if self.use_rank { self.lambda_rank } else { 0.0 },
            lambda_spd: if self.use_spd { self.lambda_spd } else { 0.0 },
            lambda_sub: if self.use_sub { self.lambda_sub } else { 0.0 },
        }
    }

    pub fn model_config(&self, au_count: usize) -> ModelConfig {
        let mut m = ModelConfig::new(au_count, self.backbone);
        m.attention_kernel = self.attention_kernel;
        m.mlp_hidden = self.mlp_hidden;
        m.leaky_slope = self.leaky_slope;
        m.pixel_mean = self.pixel_mean;
        m.pixel_std = self.pixel_std;
        m
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_subjects: self.synth_subjects,
            n_sequences: self.synth_sequences,
            frame_count: self.synth_frames,
            au_count: self.synth_aus,
            cooccurrence: self.synth_cooccurrence,
            subject_correlation: self.synth_subject_correlation,
            min_span: self.synth_min_span,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_settings() {
        let cfg = TasConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TasConfig::default());
        assert_eq!(cfg.segment_length, 16);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!((cfg.lambda_rank, cfg.lambda_spd, cfg.lambda_sub), (0.1, 0.05, 0.005));
        assert_eq!((cfg.learning_rate, cfg.weight_decay), (0.005, 0.0005));
        assert_eq!((cfg.batch_size, cfg.epochs), (16, 20));
        assert_eq!(cfg.backbone, BackboneKind::Resnet34);
    }

    #[test]
    fn overrides_and_switches() {
        let cfg = TasConfig::from_toml_str("backbone = \"tiny\"\nuse_rank = false\nuse_spd = false\nuse_sub = false\nepochs = 3\n").unwrap();
        assert_eq!(cfg.backbone, BackboneKind::Tiny);
        assert_eq!(cfg.loss_weights(), LossWeights { lambda_rank: 0.0, lambda_spd: 0.0, lambda_sub: 0.0 });
        assert_eq!(cfg.model_config(3).feature_dim, 128);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TasConfig::from_toml_str("learning_rte = 0.1").is_err());
        assert!(TasConfig::from_toml_str("segment_length = 1").is_err());
        assert!(TasConfig::from_toml_str("alpha = 0.0").is_err());
        assert!(TasConfig::from_toml_str("lambda_rank = -1.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TasConfig {
            seed: 42,
            frames_dir: Some("frames".into()),
            ..TasConfig::default()
        };
        let back = TasConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
