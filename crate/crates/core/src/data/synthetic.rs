use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic unit-variance Gaussian clusters in `dim` dimensions.
///
/// Class `c` is centred at `+-3 * e_(c / 2)`, positive for even `c`, so any two
/// means are at least `3 * sqrt(2)` apart.
pub fn synthetic_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("synthetic_blobs: empty dataset requested"));
    }
    if classes < 2 || dim == 0 {
        return Err(Error::config("synthetic_blobs needs at least two classes and one dimension"));
    }
    if classes > 2 * dim {
        return Err(Error::config(format!("{classes} well-separated classes need dim >= {}", classes.div_ceil(2))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (axis, sign) = (c / 2, if c % 2 == 0 { 1.0 } else { -1.0 });
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centre = if d == axis { 3.0 * sign } else { 0.0 };
            data.push((centre + noise) as f32);
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, SplitTag::Train)
}
