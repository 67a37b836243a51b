//! Run configuration documents.
//!
//! A run is fully determined by one JSON document:
//!
//! ```json
//! {
//!   "seed": 0,
//!   "model": { "fgpa_enabled": true, "aff_mode": "elementwise_gate", ... },
//!   "train": { "iterations": 2000, "batch_size": 16, "optimizer": { "lr": 0.0001 } },
//!   "data": { "kind": "synthetic", "num_images": 16, "seed": 4 },
//!   "eval_data": null,
//!   "output_dir": "runs/default"
//! }
//! ```
//!
//! Every section falls back to its defaults. `seed` overrides both the model
//! initialization seed and the batch-order seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::coco::Dataset;
use crate::harness::synth::{synth_generate, SynthConfig};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SMALLDETR_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Coco {
        /// Annotation JSON; image files resolve against its directory.
        annotations: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => synth_generate(cfg),
            DataSource::Coco { annotations } => Dataset::load(annotations),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Evaluation set; the training set when absent.
    pub eval_data: Option<DataSource>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            eval_data: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
            if s.classes > self.model.classes {
                return Err(Error::Config(format!(
                    "data has {} classes but the model predicts {}",
                    s.classes, self.model.classes
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
