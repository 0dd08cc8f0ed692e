use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean cross-entropy of `softmax(logits)` against integer labels, with the
/// gradient `(softmax - onehot) / B` with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {}", labels.len(), b),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} outside [0, {k})")));
    }
    if b == 0 {
        return Err(Error::dim("softmax_cross_entropy", "empty batch"));
    }
    let ld = logits.data();
    let mut grad = vec![T::zero(); b * k];
    let mut total = 0.0f64;
    let inv_b = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &ld[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.as_f64() - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - (row[label].as_f64() - max);
        for j in 0..k {
            let sm = (row[j].as_f64() - max - log_denom).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[i * k + j] = T::lit((sm - onehot) * inv_b);
        }
    }
    let loss = T::lit(total * inv_b);
    if !loss.is_finite() {
        return Err(Error::Numeric("softmax_cross_entropy".into()));
    }
    Ok((loss, Tensor::new(vec![b, k], grad)?.finite("softmax_cross_entropy")?))
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
