//! Datasets, IDX ingestion, synthetic data and deterministic splits.

mod idx;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxError};
pub use idx::{MNIST_MEAN, MNIST_STD};
pub use split::{batch_indices, carve_calibration, split, split_and_batch, SplitBatches};
pub use synthetic::synthetic_blobs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Calibration,
}

/// Per-channel normalization applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`, one sample per leading index.
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: SplitTag,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, classes: usize, split: SplitTag) -> Result<Self> {
        if inputs.ndim() == 0 || inputs.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for inputs {:?}", labels.len(), inputs.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.inputs.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Self {
        let (inputs, labels) = self.batch(idx);
        Self {
            inputs,
            labels,
            classes: self.classes,
            split,
            normalization: self.normalization.clone(),
        }
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}
