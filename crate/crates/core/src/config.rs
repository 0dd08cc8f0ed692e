//! Run configuration: one TOML document that fully determines a run.
//!
//! Unknown keys are rejected. The sparsity section has no defaults so every
//! efficiency knob is visible in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::CompareConfig;
use crate::data::{carve_calibration, load_mnist_idx, split, synthetic_blobs, Dataset, SplitTag};
use crate::deploy::DEFAULT_KEEP_QUANTILE;
use crate::error::{Error, Result};
use crate::model::{Architecture, GateConfig};
use crate::objective::SparsityConfig;
use crate::train::TrainConfig;

pub const DEFAULT_SEED: u64 = 42;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Mnist,
    /// Gaussian blobs from [`synthetic_blobs`].
    Blobs,
}

fn default_val_fraction() -> f64 {
    0.1
}
fn default_calibration_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four MNIST IDX files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Share of the training file held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Share of the remaining training data held out for BN recalibration.
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
    /// Use only the first `n` training-file samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Blob count, dimension and classes (blobs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Threshold override; defaults to the gates' own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default = "default_keep_quantile")]
    pub keep_quantile: f64,
    #[serde(default = "default_calibration_batch")]
    pub calibration_batch: usize,
}

fn default_keep_quantile() -> f64 {
    DEFAULT_KEEP_QUANTILE
}
fn default_calibration_batch() -> usize {
    500
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau: None,
            keep_quantile: DEFAULT_KEEP_QUANTILE,
            calibration_batch: default_calibration_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to [`DEFAULT_SEED`] (callers should say so).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: Architecture,
    #[serde(default)]
    pub gates: GateConfig,
    pub train: TrainConfig,
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed(),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sparsity.validate()?;
        if (self.sparsity.tau - self.gates.tau).abs() > 0.0 {
            return Err(Error::config(format!(
                "sparsity.tau ({}) and gates.tau ({}) disagree",
                self.sparsity.tau, self.gates.tau
            )));
        }
        let d = &self.data;
        for (name, v) in [("data.val_fraction", d.val_fraction), ("data.calibration_fraction", d.calibration_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if d.source == DataSource::Blobs && (d.samples.is_none() || d.dim.is_none() || d.classes.is_none()) {
            return Err(Error::config("blobs data needs data.samples, data.dim and data.classes"));
        }
        if !(self.prune.keep_quantile > 0.0 && self.prune.keep_quantile <= 1.0) {
            return Err(Error::config("prune.keep_quantile must lie in (0, 1]"));
        }
        if let Some(c) = &self.compare {
            c.validate()?;
        }
        Ok(())
    }
}

/// Every split a run needs. Splits are disjoint and fixed by the run seed.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    /// Loads the data described by `cfg`. MNIST needs `dir`, already resolved
    /// by the caller from flags, config or environment.
    pub fn load(cfg: &DataConfig, dir: Option<&Path>, seed: u64) -> Result<Self> {
        let (pool, test) = match cfg.source {
            DataSource::Mnist => {
                let dir = dir.ok_or_else(|| Error::config("missing dataset path for MNIST"))?;
                let f = |name: &str| dir.join(name);
                let train = load_mnist_idx(&f(MNIST_FILES[0]), &f(MNIST_FILES[1]), SplitTag::Train)?;
                let test = load_mnist_idx(&f(MNIST_FILES[2]), &f(MNIST_FILES[3]), SplitTag::Test)?;
                let train = match cfg.train_limit {
                    Some(n) => train.head(n),
                    None => train,
                };
                let test = match cfg.test_limit {
                    Some(n) => test.head(n),
                    None => test,
                };
                (train, test)
            }
            DataSource::Blobs => {
                let n = cfg.samples.unwrap_or(0);
                let all = synthetic_blobs(n, cfg.classes.unwrap_or(0), cfg.dim.unwrap_or(0), seed)?;
                let parts = split(&all, &[(SplitTag::Train, 0.9), (SplitTag::Test, 0.1)], seed)?;
                (parts[0].clone(), parts[1].clone())
            }
        };
        let parts = split(
            &pool,
            &[(SplitTag::Train, 1.0 - cfg.val_fraction), (SplitTag::Val, cfg.val_fraction)],
            seed,
        )?;
        let (train, calibration) = carve_calibration(&parts[0], cfg.calibration_fraction, seed)?;
        Ok(Self {
            train,
            val: parts[1].clone(),
            calibration,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
seed = 7

[data]
source = "blobs"
samples = 400
dim = 8
classes = 4

[model]
arch = "mlp"
widths = [8, 16, 4]

[train]
epochs = 2

[sparsity]
lambda_l0 = 0.0
lambda_flops = 0.0
lambda_target = 1.0
target_active = 0.5
tau = 0.5
l0_ramp = { delay = 0.0, length = 1.0 }
target_ramp = { delay = 0.0, length = 1.0 }
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_toml(SMOKE).unwrap();
        assert_eq!(cfg.seed(), 7);
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = SMOKE.replace("epochs = 2", "epochs = 2\nlearning_rate = 0.1");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn sparsity_weights_have_no_defaults() {
        let text = SMOKE.replace("lambda_target = 1.0\n", "");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("lambda_target"), "{err}");
    }

    #[test]
    fn blob_splits_are_disjoint_and_cover_the_pool() {
        let cfg = RunConfig::from_toml(SMOKE).unwrap();
        let s = DataSplits::load(&cfg.data, None, cfg.seed()).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.calibration.len() + s.test.len(), 400);
        assert!(!s.calibration.is_empty() && !s.val.is_empty());
    }

    #[test]
    fn mnist_without_a_directory_is_a_config_error() {
        let text = SMOKE.replace("source = \"blobs\"", "source = \"mnist\"");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(matches!(DataSplits::load(&cfg.data, None, 1), Err(Error::Config(_))));
    }
}
