use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::Method;
use crate::bayes::TrainConfig;
use crate::codec::blob_hash;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy1 {
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Toy2 {
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    TwoMoons {
        n: usize,
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    Bars {
        n_per_class: usize,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
    /// A binary dataset container written by `gen-data`.
    File { path: PathBuf },
}

fn default_delimiter() -> char {
    ','
}

/// A loaded dataset plus the content hash of the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub input_hash: String,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Toy1 { n_per_class, .. } | DatasetSpec::Toy2 { n_per_class, .. }
                if *n_per_class == 0 =>
            {
                Err(Error::Config("dataset.n_per_class must be >= 1".into()))
            }
            DatasetSpec::TwoMoons { n, noise_std, .. } if *n < 2 || !(*noise_std >= 0.0) => Err(
                Error::Config("two_moons needs n >= 2 and noise_std >= 0".into()),
            ),
            DatasetSpec::Bars {
                n_per_class, size, ..
            } if *n_per_class == 0 || *size < 2 => Err(Error::Config(
                "bars needs n_per_class >= 1 and size >= 2".into(),
            )),
            DatasetSpec::Csv { delimiter, .. } if !delimiter.is_ascii() => Err(Error::Config(
                format!("delimiter {delimiter:?} must be ASCII"),
            )),
            _ => Ok(()),
        }
    }

    /// Generates or reads the dataset; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedDataset> {
        self.validate()?;
        let generated = |d: Dataset| {
            let input_hash = blob_hash(&d.to_bytes());
            Ok(LoadedDataset {
                dataset: d,
                input_hash,
            })
        };
        match self {
            DatasetSpec::Toy1 { n_per_class, seed } => {
                generated(data::gen_toy1(*n_per_class, *seed))
            }
            DatasetSpec::Toy2 { n_per_class, seed } => {
                generated(data::gen_toy2(*n_per_class, *seed))
            }
            DatasetSpec::TwoMoons { n, noise_std, seed } => {
                generated(data::gen_two_moons(*n, *noise_std, *seed))
            }
            DatasetSpec::Bars {
                n_per_class,
                size,
                seed,
            } => generated(data::gen_bars(*n_per_class, *size, *seed)),
            DatasetSpec::Csv {
                path,
                label_column,
                delimiter,
            } => {
                let path = base.join(path);
                let bytes = std::fs::read(&path)?;
                let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse {
                    line: 0,
                    message: format!("not UTF-8: {e}"),
                })?;
                let dataset = data::tabular::parse_csv(&text, label_column, *delimiter as u8)?;
                Ok(LoadedDataset {
                    dataset,
                    input_hash: blob_hash(&bytes),
                })
            }
            DatasetSpec::File { path } => {
                let bytes = std::fs::read(base.join(path))?;
                Ok(LoadedDataset {
                    dataset: Dataset::from_bytes(&bytes)?,
                    input_hash: blob_hash(&bytes),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: default_test_fraction(),
            stratified: true,
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}
fn default_tau() -> f64 {
    0.9
}
fn default_lambda() -> f64 {
    1.0
}
fn default_m_predict() -> usize {
    32
}
fn default_initial_per_class() -> usize {
    2
}
fn default_ece_bins() -> usize {
    15
}

/// Declarative experiment description; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub cycles: usize,
    pub per_cycle_pool: usize,
    pub budget: usize,
    pub acquisition: Method,
    #[serde(default = "default_tau")]
    pub tau_conf: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_m_predict")]
    pub m_predict: usize,
    /// Size of the stratified labeled seed set, per class.
    #[serde(default = "default_initial_per_class")]
    pub initial_per_class: usize,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    /// Optional PCA reduction keeping this fraction of pool variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca_variance: Option<f64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML rendering; the source of record for a run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn config_hash(&self) -> String {
        blob_hash(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.cycles == 0 {
            return bad("cycles must be >= 1".into());
        }
        if self.per_cycle_pool == 0 {
            return bad("per_cycle_pool must be >= 1".into());
        }
        if self.budget > self.per_cycle_pool {
            return bad(format!(
                "budget {} exceeds per_cycle_pool {}",
                self.budget, self.per_cycle_pool
            ));
        }
        if !(self.tau_conf > 0.0 && self.tau_conf < 1.0) {
            return bad(format!(
                "tau_conf must lie in (0, 1), got {}",
                self.tau_conf
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.m_predict == 0
            || (self.acquisition == Method::PredictiveVariance && self.m_predict < 2)
        {
            return bad(format!(
                "m_predict {} too small for {}",
                self.m_predict, self.acquisition
            ));
        }
        if self.initial_per_class == 0 {
            return bad("initial_per_class must be >= 1".into());
        }
        if self.ece_bins == 0 {
            return bad("ece_bins must be >= 1".into());
        }
        if let Some(v) = self.pca_variance {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("pca_variance must lie in (0, 1], got {v}"));
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!(
                "split.test_fraction must lie in (0, 1), got {}",
                self.split.test_fraction
            ));
        }
        self.dataset.validate()?;
        self.train.validate()
    }
}
