use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running statistics and affine parameters of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BnState<T> {
    /// Identity affine map with zero-mean, unit-variance running statistics.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn keep_channels(&self, keep: &[usize]) -> Self {
        let pick = |v: &[T]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

/// Values saved by the forward pass for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

/// `(batch, channels, spatial)` of a `[B, C, ...]` tensor.
pub(crate) fn bn_layout(shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::dim(
            "batchnorm",
            format!("input {shape:?} does not have {channels} channels on axis 1"),
        ));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

/// Batch normalization over axis 1 of `x [B, C, ...]`.
///
/// Training mode normalizes with the biased batch statistics and folds them
/// into the running estimates; inference mode uses the running estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BnState<T>,
    training: bool,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = state.channels();
    let (b, s) = bn_layout(x.shape(), c)?;
    let m = b * s;
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = if training {
            if m == 0 {
                return Err(Error::dim("batchnorm", "empty batch in training mode"));
            }
            let mut sum = 0.0f64;
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * s..][..s] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / m as f64;
            let mut sq = 0.0f64;
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * s..][..s] {
                    let d = v.as_f64() - mean;
                    sq += d * d;
                }
            }
            let var = sq / m as f64;
            let mom = state.momentum;
            state.running_mean[ch] = T::lit((1.0 - mom) * state.running_mean[ch].as_f64() + mom * mean);
            state.running_var[ch] = T::lit((1.0 - mom) * state.running_var[ch].as_f64() + mom * var);
            (mean, var)
        } else {
            (state.running_mean[ch].as_f64(), state.running_var[ch].as_f64())
        };
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ch] = T::lit(istd);
        let (g, be) = (state.gamma[ch], state.beta[ch]);
        let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                let xh = (xd[i] - mean_t) * istd_t;
                xhat[i] = xh;
                y[i] = g * xh + be;
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?.finite("batchnorm")?;
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            training,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    state: &BnState<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = state.channels();
    let (b, s) = bn_layout(grad_out.shape(), c)?;
    if cache.xhat.len() != grad_out.len() {
        return Err(Error::dim("batchnorm_backward", "cache does not match upstream gradient"));
    }
    let m = (b * s) as f64;
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); gd.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                sum_dy += gd[i].as_f64();
                sum_dy_xh += (gd[i] * cache.xhat[i]).as_f64();
            }
        }
        ggamma[ch] = T::lit(sum_dy_xh);
        gbeta[ch] = T::lit(sum_dy);
        let g = state.gamma[ch];
        let istd = cache.inv_std[ch];
        if cache.training {
            let mean_dy = T::lit(sum_dy / m);
            let mean_dy_xh = T::lit(sum_dy_xh / m);
            for bi in 0..b {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    gx[i] = g * istd * (gd[i] - mean_dy - cache.xhat[i] * mean_dy_xh);
                }
            }
        } else {
            for bi in 0..b {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    gx[i] = g * istd * gd[i];
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), gx)?.finite("batchnorm_backward")?,
        ggamma,
        gbeta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_one_two_three() {
        let x = Tensor::<f64>::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let mut st = BnState::new(1);
        st.eps = 1e-12;
        let (y, _) = batchnorm_forward(&x, &mut st, true).unwrap();
        // mean 2, biased variance 2/3
        let s = (2.0f64 / 3.0).sqrt();
        let want = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((want[2] - 1.2247).abs() < 1e-4);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::full(&[4, 2, 3], 7.5);
        let mut st = BnState::new(2);
        let (y, _) = batchnorm_forward(&x, &mut st, true).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unit_running_stats_are_identity_at_inference() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -4.0]).unwrap();
        let mut st = BnState::new(3);
        st.eps = 0.0;
        let (y, _) = batchnorm_forward(&x, &mut st, false).unwrap();
        assert_eq!(y, x);
        assert_eq!(st, BnState::new(3).tap_eps(0.0));
    }

    impl BnState<f64> {
        fn tap_eps(mut self, eps: f64) -> Self {
            self.eps = eps;
            self
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let mut st = BnState::new(4);
        assert!(batchnorm_forward(&x, &mut st, true).is_err());
    }
}
