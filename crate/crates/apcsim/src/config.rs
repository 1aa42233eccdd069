//! Experiment configuration: one JSON file with every default materialized,
//! hashed so artifacts from different configs are distinguishable.

use crate::data::{load_csv_dataset, load_idx_dataset, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{ArchPreset, TrainConfig};
use crate::noise::NoiseSpec;
use crate::num::Element;
use crate::optim::{Granularity, OptimConfig};
use crate::quant::QuantSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DatasetConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
        #[serde(default = "default_idx_scale")]
        scale: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        classes: usize,
        #[serde(default = "default_one")]
        scale: f64,
        /// Optional per-example feature shape, e.g. [1, 28, 28].
        #[serde(default)]
        shape: Option<Vec<usize>>,
    },
    /// Built-in deterministic grating corpus.
    Synthetic {
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_idx_scale() -> f64 {
    1.0 / 255.0
}
fn default_one() -> f64 {
    1.0
}
fn default_train_per_class() -> usize {
    200
}
fn default_test_per_class() -> usize {
    50
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            seed: 0,
        }
    }
}

fn default_budget() -> f64 {
    2.0
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_eval_batch() -> usize {
    64
}
fn default_granularity() -> Granularity {
    Granularity::PerLayer
}
fn default_preset() -> ArchPreset {
    ArchPreset::Cnn
}
fn default_noise() -> NoiseSpec {
    NoiseSpec::thermal()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Model manifest path; commands that need a model fail without it
    /// (the `train` command writes one).
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub quant: QuantSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    /// Allowed accuracy loss (percentage points) for energy searches.
    #[serde(default = "default_budget")]
    pub degradation_budget: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_preset")]
    pub preset: ArchPreset,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.quant
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.optim.validate()?;
        if !(self.degradation_budget > 0.0) || self.eval_batch == 0 {
            return Err(Error::Config(
                "degradation budget and eval batch must be positive".to_string(),
            ));
        }
        let mut paths: Vec<&PathBuf> = Vec::new();
        if let Some(m) = &self.model {
            paths.push(m);
        }
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => paths.extend([train_images, train_labels, test_images, test_labels]),
            DatasetConfig::Csv { train, test, .. } => paths.extend([train, test]),
            DatasetConfig::Synthetic { .. } => {}
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("missing path: {}", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 over the materialized (all defaults filled) JSON form.
    /// `out_dir` is excluded: it changes where artifacts land, not what
    /// they contain.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.out_dir = default_out_dir();
        let canon = serde_json::to_string(&hashed).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the fully materialized config next to the outputs, so the
    /// defaults in force are auditable.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("config.resolved.json"), text)?;
        Ok(())
    }

    pub fn load_splits<T: Element>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
                scale,
            } => Ok((
                load_idx_dataset(train_images, train_labels, *classes, *scale, "train")?,
                load_idx_dataset(test_images, test_labels, *classes, *scale, "test")?,
            )),
            DatasetConfig::Csv {
                train,
                test,
                classes,
                scale,
                shape,
            } => {
                let tr = load_csv_dataset(train, *classes, *scale, "train")?;
                let te = load_csv_dataset(test, *classes, *scale, "test")?;
                match shape {
                    Some(s) => Ok((tr.reshape_features(s.clone())?, te.reshape_features(s.clone())?)),
                    None => Ok((tr, te)),
                }
            }
            DatasetConfig::Synthetic {
                train_per_class,
                test_per_class,
                seed,
            } => Ok((
                synthetic_dataset(*train_per_class, *seed, "train"),
                synthetic_dataset(*test_per_class, seed.wrapping_add(1), "test"),
            )),
        }
    }
}
