//! Central-difference verification of analytic gradients in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the analytic gradient returned by `f` at `point` with central
/// differences of step `eps`.
///
/// Returns the largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::config(format!("grad_check step {eps} outside [1e-6, 1e-3]")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::Numeric("grad_check: f(point)".into()));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::dim(
            "grad_check",
            format!("gradient {:?} for point {:?}", analytic.shape(), point.shape()),
        ));
    }
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("grad_check: f perturbed at index {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_no_error() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.0, 2.0, 5.0]).unwrap();
        let err = grad_check(|p| Ok((p.sum(), Tensor::full(p.shape(), 1.0))), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_sum_matches_closed_form() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |p| Ok((p.data().iter().map(|v| v * v).sum(), p.map(|v| 2.0 * v))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let err = grad_check(
            |p| Ok((p.data().iter().map(|v| v * v).sum(), p.map(|v| 4.0 * v))),
            &x,
            1e-5,
        )
        .unwrap();
        // |2g - g| / max(|2g|, |g|) = 1/2 under the symmetric denominator
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|p| Ok((p.sum(), p.clone())), &x, 1e-1).is_err());
        let r = grad_check(
            |p| {
                let v = if p.data()[0] > 1.0 { f64::NAN } else { p.sum() };
                Ok((v, Tensor::full(&[1], 1.0)))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
