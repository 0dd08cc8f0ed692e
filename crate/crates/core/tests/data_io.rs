mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use swan_core::config::{DataConfig, DataSource, DataSplits, MNIST_FILES};
use swan_core::data::{
    batch_indices, load_mnist_idx, read_idx_images, read_idx_labels, split, split_and_batch, synthetic_blobs,
    write_idx_images, write_idx_labels, Dataset, IdxError, SplitTag,
};
use swan_core::Tensor;

fn idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = 0x0803u32.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[test]
fn canonical_mnist_files_load_and_reserialize() {
    let Some(dir) = common::mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    for (img, lbl, n) in [(0, 1, 60_000), (2, 3, 10_000)] {
        let (ip, lp) = (dir.join(MNIST_FILES[img]), dir.join(MNIST_FILES[lbl]));
        let ds = load_mnist_idx(&ip, &lp, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), n);
        assert_eq!(ds.sample_shape(), &[1, 28, 28]);
        assert!(ds.labels.iter().all(|&l| l < 10));
        assert_eq!(write_idx_images(&ds), std::fs::read(&ip).unwrap());
        assert_eq!(write_idx_labels(&ds), std::fs::read(&lp).unwrap());
    }
}

#[test]
fn mnist_splits_partition_the_training_file() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    let cfg = DataConfig {
        source: DataSource::Mnist,
        dir: None,
        val_fraction: 0.1,
        calibration_fraction: 0.1,
        train_limit: None,
        test_limit: None,
        samples: None,
        dim: None,
        classes: None,
    };
    let s = DataSplits::load(&cfg, Some(&dir), 42).unwrap();
    assert_eq!(s.train.len() + s.calibration.len() + s.val.len(), 60_000);
    assert_eq!(s.val.len(), 6_000);
    assert_eq!(s.calibration.len(), 5_400);
    assert_eq!(s.test.len(), 10_000);
}

#[test]
fn parse_errors_are_distinct() {
    let good = idx_images(2, 2, 2, &[0, 1, 2, 3, 4, 5, 6, 7]);
    assert!(read_idx_images(&good).is_ok());
    let labels = [0x00u8, 0, 8, 1, 0, 0, 0, 2, 3, 4];
    assert!(matches!(read_idx_images(&labels), Err(IdxError::WrongMagic { .. })));
    assert_eq!(
        read_idx_images(&good[..good.len() - 3]),
        Err(IdxError::Truncated { expected: 24, actual: 21 })
    );
    assert_eq!(read_idx_labels(&labels).unwrap(), vec![3, 4]);
}

#[test]
fn well_separated_blobs_are_deterministic_and_separable() {
    let a = synthetic_blobs(500, 2, 3, 1).unwrap();
    assert_eq!(a, synthetic_blobs(500, 2, 3, 1).unwrap());
    // A linear rule on the first axis.
    let correct = (0..a.len())
        .filter(|&i| (a.inputs.data()[i * 3] > 0.0) == (a.labels[i] == 0))
        .count();
    assert!(correct as f64 / a.len() as f64 >= 0.99);
}

#[test]
fn split_examples() {
    let ds = synthetic_blobs(100, 2, 2, 3).unwrap();
    let parts = [(SplitTag::Train, 0.8), (SplitTag::Val, 0.1), (SplitTag::Calibration, 0.1)];
    let s = split_and_batch(&ds, &parts, 128, 5).unwrap();
    assert_eq!(s.iter().map(|p| p.data.len()).collect::<Vec<_>>(), vec![80, 10, 10]);
    let whole = split_and_batch(&ds, &[(SplitTag::Train, 1.0)], 128, 5).unwrap();
    assert_eq!(whole[0].batches.len(), 1);
    assert_eq!(whole[0].batches[0].len(), 100);
    let again = split_and_batch(&ds, &parts, 16, 5).unwrap();
    assert_eq!(again[0].batches, split_and_batch(&ds, &parts, 16, 5).unwrap()[0].batches);
}

proptest! {
    #[test]
    fn idx_bytes_round_trip(n in 1usize..6, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let bytes = idx_images(n, rows, cols, &pixels);
        let (m, r, c, px) = read_idx_images(&bytes).unwrap();
        prop_assert_eq!((m, r, c), (n, rows, cols));
        let data: Vec<f32> = px.iter().map(|&p| p as f32 / 255.0).collect();
        let ds = Dataset::new(Tensor::new(vec![n, 1, rows, cols], data).unwrap(), vec![0; n], 1, SplitTag::Test).unwrap();
        prop_assert_eq!(write_idx_images(&ds), bytes);
    }

    #[test]
    fn splits_are_disjoint_and_complete(n in 10usize..300, a in 0.2f64..0.7, seed in 0u64..1000) {
        let ds = Dataset::new(
            Tensor::new(vec![n, 1], (0..n).map(|i| i as f32).collect()).unwrap(),
            vec![0; n],
            1,
            SplitTag::Train,
        ).unwrap();
        let parts = split(&ds, &[(SplitTag::Train, a), (SplitTag::Val, 1.0 - a)], seed).unwrap();
        let mut seen = HashSet::new();
        for p in &parts {
            for &v in p.inputs.data() {
                prop_assert!(seen.insert(v as usize));
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn batches_cover_every_index_once(n in 1usize..500, b in 1usize..200, seed in any::<u64>()) {
        let batches = batch_indices(n, b, Some(seed));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches[..batches.len() - 1].iter().all(|x| x.len() == b));
    }
}
