use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffles once under `seed` and cuts consecutive, disjoint splits whose
/// sizes follow the cumulative rounded fractions.
pub fn split(ds: &Dataset, parts: &[(SplitTag, f64)], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = parts.iter().map(|p| p.1).sum();
    if (total - 1.0).abs() > 1e-6 || parts.iter().any(|p| p.1 < 0.0) {
        return Err(Error::config(format!("split fractions must be non-negative and sum to 1, got {total}")));
    }
    let n = ds.len();
    let perm = permutation(n, seed);
    let mut out = Vec::with_capacity(parts.len());
    let (mut cum, mut start) = (0.0, 0);
    for (i, &(tag, frac)) in parts.iter().enumerate() {
        cum += frac;
        let end = if i + 1 == parts.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        if end <= start {
            return Err(Error::config(format!("{tag:?} split of {n} samples would be empty")));
        }
        out.push(ds.subset(&perm[start..end], tag));
        start = end;
    }
    Ok(out)
}

/// Moves `fraction` of `train` into a calibration split.
pub fn carve_calibration(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("calibration fraction {fraction} must lie in (0, 1)")));
    }
    let mut parts = split(
        train,
        &[(SplitTag::Train, 1.0 - fraction), (SplitTag::Calibration, fraction)],
        seed,
    )?
    .into_iter();
    Ok((parts.next().expect("two parts"), parts.next().expect("two parts")))
}

/// Sample indices grouped into batches; the final short batch is kept.
/// `shuffle_seed` of `None` keeps the natural order.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let idx = match shuffle_seed {
        Some(s) => permutation(n, s),
        None => (0..n).collect(),
    };
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// A split together with its batch order.
#[derive(Clone, Debug)]
pub struct SplitBatches {
    pub data: Dataset,
    pub batches: Vec<Vec<usize>>,
}

pub fn split_and_batch(
    ds: &Dataset,
    parts: &[(SplitTag, f64)],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<SplitBatches>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    Ok(split(ds, parts, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, data)| {
            let batches = batch_indices(data.len(), batch_size, Some(seed.wrapping_add(1 + i as u64)));
            SplitBatches { data, batches }
        })
        .collect())
}
