use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Composite objective (task plus weighted regularizers), sample mean.
    pub train_loss: f64,
    pub train_task_loss: f64,
    pub train_l0_term: f64,
    pub train_flops_term: f64,
    pub train_target_term: f64,
    pub train_acc: f64,
    /// Cross-entropy on validation with hard gates.
    pub val_loss: f64,
    pub val_acc_soft: f64,
    pub val_acc_hard: f64,
    pub active_fraction_soft: f64,
    pub active_fraction_hard: f64,
    /// Dense-normalized FLOPs weighted by gate probability.
    pub expected_flops_fraction: f64,
}

/// CSV file that gains one flushed row per epoch, so a crashed run keeps
/// every completed epoch.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    rows: usize,
}

impl MetricsLog {
    /// Creates (or truncates) `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        File::create(path.as_ref())?;
        Ok(Self {
            path: path.as_ref().to_path_buf(),
            rows: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, row: &EpochMetrics) -> Result<()> {
        let file = OpenOptions::new().append(true).open(&self.path)?;
        let mut w = csv::WriterBuilder::new().has_headers(self.rows == 0).from_writer(file);
        w.serialize(row)?;
        w.flush()?;
        self.rows += 1;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}
