//! Experiment configuration, read from a versioned JSON document.
//!
//! Unknown keys are rejected. Every field has a default, so `{}` plus a
//! schema version is a complete config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversity::AdversityConfig;
use crate::data::DEFAULT_SYNTHETIC_SPREAD;
use crate::error::{Error, Result};
use crate::merge::MergeConfig;
use crate::model::ModelSpec;
use crate::scaffold::UpdateMode;

pub const SCHEMA_VERSION: u32 = 1;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
    Synthetic {
        n_train: usize,
        n_test: usize,
        input_dim: usize,
        num_classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_spread() -> f64 {
    DEFAULT_SYNTHETIC_SPREAD
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mnist {
            dir: PathBuf::from("data/mnist"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta_g: f64,
    pub eta_l: f64,
    pub model: ModelSpec,
    pub mode: UpdateMode,
    /// Absent means baseline SCAFFOLD.
    pub merge: Option<MergeConfig>,
    pub adversity: AdversityConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            num_clients: 10,
            classes_per_client: 8,
            rounds: 10,
            local_epochs: 2,
            batch_size: 32,
            eta_g: 1.0,
            eta_l: 0.05,
            model: ModelSpec::default(),
            mode: UpdateMode::Standard,
            merge: Some(MergeConfig::default()),
            adversity: AdversityConfig::default(),
            seeds: vec![1],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn algorithm(&self) -> &'static str {
        if self.merge.is_some() {
            "scaffold_merge"
        } else {
            "scaffold"
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.num_clients < 1 {
            return bad("num_clients must be at least 1".into());
        }
        if self.local_epochs < 1 || self.batch_size < 1 {
            return bad("local_epochs and batch_size must be at least 1".into());
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite())
            || !(self.eta_g > 0.0 && self.eta_g.is_finite())
        {
            return bad("learning rates must be positive and finite".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.model
            .validate()
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        if let DatasetConfig::Synthetic {
            input_dim,
            num_classes,
            n_train,
            n_test,
            spread,
            ..
        } = &self.dataset
        {
            if *input_dim != self.model.input_dim || *num_classes != self.model.num_classes {
                return bad("synthetic dataset shape does not match the model spec".into());
            }
            if *n_train < *num_classes || *n_test == 0 {
                return bad("synthetic dataset is too small".into());
            }
            if !(spread.is_finite() && *spread >= 0.0) {
                return bad("synthetic spread must be finite and nonnegative".into());
            }
        }
        if self.classes_per_client < 1 || self.classes_per_client > self.model.num_classes {
            return bad(format!(
                "classes_per_client must be in [1, {}]",
                self.model.num_classes
            ));
        }
        if let Some(merge) = &self.merge {
            merge.validate(self.rounds)?;
        }
        self.adversity.validate()
    }
}
