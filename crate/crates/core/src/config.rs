//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! codebook_size = 512
//! vocab_mode = "subword"
//!
//! [model]
//! layers = 4
//! width = 128
//!
//! [train]
//! total_steps = 2000
//! batch_size = 64
//! ```
//!
//! Every field has a default. The top-level `seed` drives codebook fitting,
//! parameter initialization, batch sampling and dropout; a `seed` inside
//! `[train]` is ignored in favour of it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::DEFAULT_CODEBOOK_SIZE;
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::AttentionMode;
use crate::trainer::TrainConfig;
use crate::vocab::{VocabMode, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    pub vocab_mode: VocabMode,
    /// Upper bound on learned merges in subword mode.
    pub subword_merges: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            kmeans_iters: 25,
            vocab_mode: VocabMode::Subword,
            subword_merges: 2000,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Encoder hyperparameters; vocabulary sizes come from the fitted assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub proj_dim: usize,
    pub dropout: f64,
    pub attention: AttentionMode,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            width: e.width,
            layers: e.layers,
            heads: e.heads,
            ffn_width: e.ffn_width,
            proj_dim: e.proj_dim,
            dropout: e.dropout,
            attention: e.attention,
            pooling: e.pooling,
        }
    }
}

impl ModelConfig {
    pub fn to_encoder(&self, text_vocab: usize, audio_vocab: usize, max_len: usize) -> EncoderConfig {
        EncoderConfig {
            text_vocab,
            audio_vocab,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ffn_width: self.ffn_width,
            proj_dim: self.proj_dim,
            dropout: self.dropout,
            attention: self.attention,
            pooling: self.pooling,
            max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub micro_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { micro_batch: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.data.kmeans_iters == 0 {
            return Err(Error::Config("kmeans_iters must be positive".into()));
        }
        if self.eval.micro_batch == 0 {
            return Err(Error::Config("eval micro_batch must be positive".into()));
        }
        self.model.to_encoder(1, 1, self.data.max_len).validate()?;
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.data.codebook_size, 512);
        let cfg = PipelineConfig::from_toml(
            "seed = 3\n[model]\nwidth = 64\nattention = \"bidirectional\"\n[train]\nbatch_size = 8\nseed = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.model.width, 64);
        assert_eq!(cfg.model.attention, AttentionMode::Bidirectional);
        assert_eq!(cfg.train_config().seed, 3);
        assert_eq!(cfg.train_config().batch_size, 8);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(PipelineConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(PipelineConfig::from_toml("[model]\nheads = 3").is_err());
        assert!(PipelineConfig::from_toml("[train]\nmt_fraction = 2.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
