use std::path::{Path, PathBuf};

use addp::data::DatasetConfig;
use addp::model::ModelConfig;
use addp::predictor::PredictorConfig;
use addp::recognition::RecognitionConfig;
use addp::sampler::SamplerConfig;
use addp::tokenizer::TokenizerConfig;
use addp::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Budgets for the generation and evaluation stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Images generated for desk-FID (and the sample grid).
    pub generate_samples: usize,
    /// Held-out images compared against.
    pub fid_samples: usize,
    /// Run fine-tuning, linear probing and the input study after evaluation.
    pub recognition: bool,
    /// Images per PNG grid row.
    pub grid_columns: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { generate_samples: 512, fid_samples: 512, recognition: true, grid_columns: 16 }
    }
}

/// Everything a run needs; serialized back into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory; relative paths resolve against the working directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub recognition: RecognitionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        let c = self.tokenizer.codebook_size;
        let grid = self.tokenizer.grid();
        let mismatch = |what: &str| Err(HarnessError::Config(what.to_string()));
        if self.predictor.codebook_size != c || self.model.codebook_size != c {
            return mismatch("tokenizer.codebook_size, predictor.codebook_size and model.codebook_size must agree");
        }
        if self.predictor.grid != grid || self.model.grid() != grid {
            return mismatch("predictor.grid and the model token grid must match the tokenizer grid");
        }
        if self.dataset.resolution != self.tokenizer.resolution || self.model.resolution != self.tokenizer.resolution {
            return mismatch("dataset.resolution, tokenizer.resolution and model.resolution must agree");
        }
        self.model.validate().map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        self.sampler.validate().map_err(|e| HarnessError::Config(format!("sampler: {e}")))?;
        Ok(())
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn short_hash(&self) -> Result<String> {
        Ok(self.hash()?[..12].to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }
}
