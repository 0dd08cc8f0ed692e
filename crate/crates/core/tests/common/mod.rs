//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swan_core::config::MNIST_FILES;
use swan_core::data::{load_mnist_idx, synthetic_blobs, Dataset, SplitTag};
use swan_core::Tensor;

/// MNIST directory from SWAN_DATA_DIR or the workspace `data/mnist`, if all
/// four files are there.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("SWAN_DATA_DIR").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| MNIST_FILES.iter().all(|f| d.join(f).is_file()))
}

pub fn mnist_test() -> Option<Dataset> {
    let d = mnist_dir()?;
    Some(load_mnist_idx(&d.join(MNIST_FILES[2]), &d.join(MNIST_FILES[3]), SplitTag::Test).unwrap())
}

pub fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// `n` MNIST test images, or deterministic noise of the same shape.
pub fn mnist_or_random_batch(n: usize) -> Tensor<f32> {
    match mnist_test() {
        Some(ds) => ds.head(n).inputs,
        None => random_batch(&[n, 1, 28, 28], 5).cast(),
    }
}

pub fn blobs(n: usize, classes: usize, dim: usize) -> Dataset {
    synthetic_blobs(n, classes, dim, 17).unwrap()
}
