use std::path::{Path, PathBuf};

use dialsum_core::decode::BeamConfig;
use dialsum_core::hpo::{SearchSpace, TpeConfig};
use dialsum_core::model::{LoraSpec, ModelConfig, TrainConfig};
use dialsum_core::tokenizer::SOURCE_BUDGET;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    /// Artifact directory; relative paths resolve against the config file.
    pub workdir: PathBuf,
    pub data: DataConfig,
    pub classifier: TaskConfig,
    pub summarizer: SummarizerConfig,
    /// Fallback decoding settings when no tuned configuration exists.
    #[serde(default)]
    pub decode: BeamConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training triplets (JSONL or CSV). Ignored when `synthetic` is set.
    pub path: Option<PathBuf>,
    /// Held-out triplets for `predict`/`evaluate`.
    pub test_path: Option<PathBuf>,
    pub synthetic: bool,
    pub n_examples: usize,
    pub n_test_examples: usize,
    /// Pseudo-word pool size of the synthetic generator.
    pub synthetic_pool: usize,
    pub vocab_size: usize,
    pub k_folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            test_path: None,
            synthetic: false,
            n_examples: 1201,
            n_test_examples: 200,
            synthetic_pool: 1000,
            vocab_size: 4000,
            k_folds: 3,
        }
    }
}

/// Model shape without the data-dependent sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    #[serde(default)]
    pub n_layers_dec: usize,
    pub d_ff: usize,
    #[serde(default = "default_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub dropout_p: f64,
}

fn default_positions() -> usize {
    SOURCE_BUDGET
}

impl ArchConfig {
    pub fn model_config(&self, vocab_size: usize, n_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            n_classes,
            dropout_p: self.dropout_p,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub lora: LoraSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerConfig {
    pub architectures: Vec<ArchConfig>,
    pub train: TrainConfig,
    pub lora: LoraSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub n_trials: usize,
    pub tpe: TpeConfig,
    pub space: SearchSpace,
    /// Caps validation examples per fold; `None` uses all of them.
    pub max_val_examples: Option<usize>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            n_trials: 50,
            tpe: TpeConfig::default(),
            space: SearchSpace::beam_search(),
            max_val_examples: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleBackend {
    /// Token embeddings of the first summarizer in the run.
    Embedding,
    Tfidf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    pub ensemble_backend: EnsembleBackend,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            embedding_dim: 64,
            embedding_seed: 0,
            ensemble_backend: EnsembleBackend::Embedding,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.workdir);
        if let Some(p) = cfg.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.test_path.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.summarizer.architectures.is_empty() {
            return usage("summarizer.architectures must list at least one architecture".into());
        }
        let mut names: Vec<&str> = self.summarizer.architectures.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.summarizer.architectures.len() {
            return usage("summarizer architecture names must be unique".into());
        }
        if self.summarizer.architectures.iter().any(|a| a.n_layers_dec == 0) {
            return usage("summarizer architectures need n_layers_dec >= 1".into());
        }
        if self.classifier.arch.n_layers_dec != 0 {
            return usage("classifier arch must have n_layers_dec = 0".into());
        }
        if self.data.k_folds < 2 {
            return usage("data.k_folds must be >= 2".into());
        }
        for t in [&self.classifier.train, &self.summarizer.train] {
            t.validate()?;
        }
        self.classifier.lora.validate()?;
        self.summarizer.lora.validate()?;
        self.decode.validate()?;
        self.tune.tpe.validate()?;
        self.tune.space.validate()?;
        Ok(())
    }

    pub fn arch(&self, name: &str) -> Result<&ArchConfig, CliError> {
        self.summarizer
            .architectures
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CliError::Usage(format!("unknown summarizer architecture {name}")))
    }
}
