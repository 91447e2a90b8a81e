//! Run configuration document: one JSON file with a section per pipeline
//! stage. Every field is optional and falls back to the stage's default;
//! unknown keys are rejected so typos fail loudly instead of silently
//! running the default. Seeds have no default anywhere randomness is
//! involved, so they must be written down.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use zsar_core::attention::AttentionScheme;
use zsar_core::encoder::{EncoderConfig, LossMode, OptimizerSettings, OptimAlgorithm};
use zsar_core::synth::SynthConfig;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub training: TrainingSection,
    pub transfer: TransferSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub max_visual_len: Option<usize>,
    pub max_word_len: Option<usize>,
    pub attention_scheme: Option<AttentionScheme>,
    pub loss_mode: Option<LossMode>,
    pub omega_mtl: Option<f64>,
    pub mask_prob: Option<f64>,
    pub seed: Option<u64>,
}

impl EncoderSection {
    /// Fill in a full encoder config. The data-derived dimensions (feature
    /// width, vocabulary, class count, observed sequence lengths) come from
    /// the caller; sequence-length overrides may only extend them.
    pub fn materialize(
        &self,
        input_feature_dim: usize,
        vocab_size: usize,
        data_visual_len: usize,
        data_word_len: usize,
        num_seen_classes: usize,
    ) -> Result<EncoderConfig> {
        let Some(seed) = self.seed else {
            bail!("encoder.seed is required: training must be reproducible");
        };
        let mut config = EncoderConfig::desk(
            input_feature_dim,
            vocab_size,
            self.max_visual_len.unwrap_or(data_visual_len),
            self.max_word_len.unwrap_or(data_word_len),
            num_seen_classes,
            seed,
        );
        if config.max_visual_len < data_visual_len {
            bail!(
                "encoder.max_visual_len {} is shorter than the longest instance ({data_visual_len} frames)",
                config.max_visual_len
            );
        }
        if config.max_word_len < data_word_len {
            bail!(
                "encoder.max_word_len {} is shorter than the longest label ({data_word_len} words)",
                config.max_word_len
            );
        }
        if let Some(v) = self.num_layers {
            config.num_layers = v;
        }
        if let Some(v) = self.hidden_dim {
            config.hidden_dim = v;
        }
        if let Some(v) = self.num_heads {
            config.num_heads = v;
        }
        if let Some(v) = self.mlp_dim {
            config.mlp_dim = v;
        }
        if let Some(v) = self.attention_scheme {
            config.attention_scheme = v;
        }
        if let Some(v) = self.loss_mode {
            config.loss_mode = v;
        }
        if let Some(v) = self.omega_mtl {
            config.omega_mtl = v;
        }
        if let Some(v) = self.mask_prob {
            config.mask_prob = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub algorithm: Option<OptimAlgorithm>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

impl TrainingSection {
    pub fn materialize(&self) -> Result<OptimizerSettings> {
        let mut settings = OptimizerSettings::desk();
        if let Some(v) = self.algorithm {
            settings.algorithm = v;
        }
        if let Some(v) = self.learning_rate {
            settings.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            settings.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            settings.epochs = v;
        }
        if let Some(v) = self.batch_size {
            settings.batch_size = v;
        }
        settings.validate()?;
        Ok(settings)
    }
}

/// Defaults for the transfer flags; there is no built-in fallback behind
/// these, so a value must arrive either here or on the command line.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub theta: Option<f64>,
    pub k: Option<usize>,
    pub rho: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub fraction: Option<f64>,
    pub num_splits: Option<usize>,
    pub seed: Option<u64>,
    pub unconstrained: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_seen: Option<usize>,
    pub num_unseen: Option<usize>,
    pub instances_per_class: Option<usize>,
    pub frames_per_instance: Option<usize>,
    pub feature_dim: Option<usize>,
    pub word_dim: Option<usize>,
    pub components: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

impl SynthSection {
    pub fn materialize(&self) -> Result<SynthConfig> {
        let Some(seed) = self.seed else {
            bail!("synth.seed is required: generation must be reproducible");
        };
        let mut config = SynthConfig::desk(seed);
        if let Some(v) = self.num_seen {
            config.num_seen = v;
        }
        if let Some(v) = self.num_unseen {
            config.num_unseen = v;
        }
        if let Some(v) = self.instances_per_class {
            config.instances_per_class = v;
        }
        if let Some(v) = self.frames_per_instance {
            config.frames_per_instance = v;
        }
        if let Some(v) = self.feature_dim {
            config.feature_dim = v;
        }
        if let Some(v) = self.word_dim {
            config.word_dim = v;
        }
        if let Some(v) = self.components {
            config.components = v;
        }
        if let Some(v) = self.noise {
            config.noise = v;
        }
        config.validate()?;
        Ok(config)
    }
}
