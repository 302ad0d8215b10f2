//! The run configuration file and its resolved snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use metapico_core::model::{ModelConfig, TIER_NAMES};
use metapico_core::train::{MetaConfig, RunConfigs, TrainConfig};
use metapico_core::{Error, Result};
use metapico_ner::FinetuneConfig;
use serde::{Deserialize, Deserializer, Serialize};

/// Name of the resolved-config snapshot written into every run directory.
pub const SNAPSHOT_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// A named capacity tier or a full model description.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Tier(String),
    Explicit(ModelConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Tier("medium".into())
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => Ok(ModelSpec::Tier(s)),
            v @ serde_json::Value::Object(_) => {
                ModelConfig::deserialize(v).map(ModelSpec::Explicit).map_err(D::Error::custom)
            }
            other => Err(D::Error::custom(format!("model must be one of {TIER_NAMES:?} or an object, got {other}"))),
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Tier(name) => ModelConfig::tier(name)?,
            ModelSpec::Explicit(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pretraining data: a pretokenized corpus with its vocabulary, or the
/// synthetic generator when `corpus` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub synthetic_sequences: usize,
    /// Sequences split off the end of the corpus for held-out perplexity.
    pub heldout_sequences: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: None, vocab: None, synthetic_sequences: 4000, heldout_sequences: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub particles: Vec<String>,
    pub top_n: usize,
    pub slope_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            particles: metapico_analysis::default_particles(),
            top_n: 10,
            slope_k: metapico_analysis::DEFAULT_SLOPE_POINTS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub data: DataConfig,
    pub finetune: FinetuneConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Validates every section and replaces a tier name by its full model description.
    pub fn resolved(&self) -> Result<Self> {
        let model = self.model.resolve()?;
        self.train.validate()?;
        self.meta.validate()?;
        self.finetune.validate()?;
        if self.analysis.slope_k < 2 || self.analysis.top_n == 0 {
            return Err(Error::Config("analysis.slope_k must be at least 2 and top_n positive".into()));
        }
        if self.data.corpus.is_some() != self.data.vocab.is_some() {
            return Err(Error::Config("data.corpus and data.vocab must be given together".into()));
        }
        Ok(Self { model: ModelSpec::Explicit(model), ..self.clone() })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    pub fn run_configs(&self) -> Result<RunConfigs> {
        Ok(RunConfigs { model: self.model_config()?, train: self.train.clone(), meta: self.meta.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
