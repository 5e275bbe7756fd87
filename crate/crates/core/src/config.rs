//! Run configuration read from a flat TOML key-value file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::corpus::DegradePolicy;
use crate::error::{Error, Result};
use crate::evalcorr::TiePolicy;
use crate::labeling::LabelingScheme;
use crate::model::{FormatMasks, ModelConfig};
use crate::mra::MaskVariant;

/// Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    /// Upper bound on vocabulary entries, specials included.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Regression head widths; defaults to `(3·d_model, d_model, 1)`.
    pub head_dims: Option<[usize; 3]>,
    pub max_len: usize,
    pub segment_embeddings: bool,
    pub mask_ref: MaskVariant,
    pub mask_src: MaskVariant,
    pub mask_src_ref: MaskVariant,

    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Examples per format per step.
    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub dev_fraction: f64,
    pub dev_min: usize,

    pub degrade_portion: f64,
    pub word_drop: f64,
    pub max_span: usize,

    pub ensemble: usize,
    pub labeling: LabelingScheme,

    pub ties: TiePolicy,
    pub pair_threshold: f64,

    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let adam = AdamConfig::default();
        let degrade = DegradePolicy::default();
        Self {
            seed: 0,
            vocab_size: model.vocab_size,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            d_ffn: model.d_ffn,
            head_dims: None,
            max_len: model.max_len,
            segment_embeddings: model.segment_embeddings,
            mask_ref: model.masks.ref_format,
            mask_src: model.masks.src_format,
            mask_src_ref: model.masks.src_ref_format,
            lr_pretrain: 1e-3,
            lr_finetune: 3e-4,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 1.0,
            batch_size: 16,
            pretrain_steps: 1000,
            finetune_steps: 1000,
            dev_fraction: 0.1,
            dev_min: 32,
            degrade_portion: degrade.portion,
            word_drop: degrade.word_drop,
            max_span: degrade.max_span,
            ensemble: 1,
            labeling: LabelingScheme::Rank,
            ties: TiePolicy::Discordant,
            pair_threshold: 0.1,
            train_path: None,
            dev_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!("dev_fraction {} not in [0,1)", self.dev_fraction)));
        }
        self.degrade_policy().validate()?;
        self.model_config(self.vocab_size).validate()
    }

    /// Model shape for a vocabulary of `vocab_len` entries.
    pub fn model_config(&self, vocab_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab_len,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            head_dims: self.head_dims.unwrap_or_else(|| ModelConfig::scaled_head(self.d_model)),
            max_len: self.max_len,
            masks: FormatMasks {
                ref_format: self.mask_ref,
                src_format: self.mask_src,
                src_ref_format: self.mask_src_ref,
            },
            segment_embeddings: self.segment_embeddings,
            precision: "f64".into(),
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn degrade_policy(&self) -> DegradePolicy {
        DegradePolicy {
            portion: self.degrade_portion,
            word_drop: self.word_drop,
            max_span: self.max_span,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn keys_override_defaults() {
        let c = RunConfig::parse("seed = 7\nd_model = 32\nmask_src_ref = \"hard\"\nlabeling = \"z-norm\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model_config(100).head_dims, [96, 32, 1]);
        assert_eq!(c.model_config(100).masks.src_ref_format, MaskVariant::Hard);
        assert_eq!(c.labeling, LabelingScheme::ZNorm);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::parse("n_heads = 5\n").is_err());
        assert!(RunConfig::parse("mask_ref = \"hard\"\n").is_err());
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
    }

    #[test]
    fn clip_zero_disables() {
        let c = RunConfig::parse("clip_norm = 0.0\n").unwrap();
        assert_eq!(c.adam(0.1).clip_norm, None);
    }
}
