//! Big-endian IDX files as used by MNIST.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Dataset, Normalization, SplitTag};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Header dimensions and payload of an IDX file with `ndims` dimensions.
fn parse(bytes: &[u8], magic: u32, ndims: usize) -> std::result::Result<(Vec<usize>, &[u8]), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(IdxError::WrongMagic { expected: magic, found });
    }
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndims;
    let expected = start + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, &bytes[start..]))
}

/// `(count, rows, cols, pixels)` of an image file.
pub fn read_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let (d, payload) = parse(bytes, IMAGES_MAGIC, 3)?;
    Ok((d[0], d[1], d[2], payload.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, 1)?;
    Ok(payload.to_vec())
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Serializes normalized `[N, 1, H, W]` images back to IDX bytes.
pub fn write_idx_images(ds: &Dataset) -> Vec<u8> {
    let s = ds.inputs.shape();
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    let (mean, std) = match &ds.normalization {
        Some(n) => (n.mean[0], n.std[0]),
        None => (0.0, 1.0),
    };
    let mut out = header(IMAGES_MAGIC, &[ds.len(), rows, cols]);
    out.extend(
        ds.inputs
            .data()
            .iter()
            .map(|&v| ((v as f64 * std + mean) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn write_idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = header(LABELS_MAGIC, &[ds.len()]);
    out.extend(ds.labels.iter().map(|&l| l as u8));
    out
}

/// Loads an image/label IDX pair as `[N, 1, H, W]` inputs scaled to `[0, 1]`
/// and normalized with the MNIST mean and standard deviation.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: SplitTag) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(&fs::read(images)?)?;
    let label_bytes = read_idx_labels(&fs::read(labels)?)?;
    if label_bytes.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: label_bytes.len(),
        }
        .into());
    }
    let data = pixels
        .iter()
        .map(|&p| ((p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD) as f32)
        .collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    let classes = 10.max(label_bytes.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    let mut ds = Dataset::new(inputs, label_bytes.iter().map(|&l| l as usize).collect(), classes, split)?;
    ds.normalization = Some(Normalization {
        mean: vec![MNIST_MEAN],
        std: vec![MNIST_STD],
    });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> Vec<u8> {
        let mut b = header(IMAGES_MAGIC, &[2, 2, 3]);
        b.extend([0, 255, 17, 3, 128, 9, 200, 1, 2, 3, 4, 5]);
        b
    }

    #[test]
    fn parses_header_and_payload() {
        let (n, r, c, px) = read_idx_images(&tiny_images()).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 2, 3, 12));
    }

    #[test]
    fn labels_fed_as_images_is_wrong_magic() {
        let mut labels = header(LABELS_MAGIC, &[2]);
        labels.extend([1, 2]);
        assert_eq!(
            read_idx_images(&labels).unwrap_err(),
            IdxError::WrongMagic {
                expected: IMAGES_MAGIC,
                found: LABELS_MAGIC
            }
        );
    }

    #[test]
    fn truncation_names_both_sizes() {
        let mut b = tiny_images();
        b.truncate(b.len() - 5);
        let err = read_idx_images(&b).unwrap_err();
        assert_eq!(err, IdxError::Truncated { expected: 28, actual: 23 });
        assert!(err.to_string().contains("28") && err.to_string().contains("23"));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&img, tiny_images()).unwrap();
        let mut l = header(LABELS_MAGIC, &[3]);
        l.extend([0, 1, 2]);
        fs::write(&lab, l).unwrap();
        let err = load_mnist_idx(&img, &lab, SplitTag::Train).unwrap_err();
        assert!(matches!(
            err,
            crate::Error::Idx(IdxError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn normalized_load_reserializes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        let mut l = header(LABELS_MAGIC, &[2]);
        l.extend([7, 3]);
        fs::write(&img, tiny_images()).unwrap();
        fs::write(&lab, &l).unwrap();
        let ds = load_mnist_idx(&img, &lab, SplitTag::Test).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 1, 2, 3]);
        assert_eq!(write_idx_images(&ds), tiny_images());
        assert_eq!(write_idx_labels(&ds), l);
    }
}
