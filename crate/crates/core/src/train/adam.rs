use std::num::FpCategory;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamRole, ParamSlot};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gate logits step `gate_lr_multiplier` times faster than the backbone.
    pub gate_lr_multiplier: f64,
    /// Decoupled decay, applied to backbone parameters only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gate_lr_multiplier: 10.0,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one buffer per parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every slot.
///
/// Nothing is modified if any gradient is non-finite; the error names the
/// offending parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [ParamSlot<'_, T>],
    grads: &[&[T]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.data.len() != g.len() {
            return Err(Error::dim("adam_step", format!("gradient of {} has the wrong length", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("adam_step: gradient of {}", p.name)));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.data.len()) {
        return Err(Error::dim("adam_step", "optimizer state does not match the parameters"));
    }
    state.step += 1;
    let t = state.step as f64;
    let (c1, c2) = (1.0 - cfg.beta1.powf(t), 1.0 - cfg.beta2.powf(t));
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (lr, wd) = match p.role {
            ParamRole::Gate => (cfg.lr * cfg.gate_lr_multiplier, 0.0),
            ParamRole::Backbone => (cfg.lr, cfg.weight_decay),
        };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..g.len() {
            let gi = g[i].as_f64();
            m[i] = flush(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
            v[i] = flush(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            let theta = p.data[i].as_f64();
            let next = T::lit(theta - lr * (update + wd * theta));
            p.data[i] = if next.classify() == FpCategory::Subnormal { T::zero() } else { next };
        }
    }
    Ok(())
}

/// Moments of units that stop receiving gradient (closed gates) decay
/// geometrically into the subnormal range, where arithmetic is very slow.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(name: &str, role: ParamRole, data: &'a mut [f64]) -> ParamSlot<'a, f64> {
        ParamSlot {
            name: name.into(),
            role,
            data,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = [1.5, -2.0];
        let mut st = AdamState::new();
        adam_step(&mut [slot("w", ParamRole::Backbone, &mut w)], &[&[0.0, 0.0]], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(w, [1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut w = [0.0];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut [slot("w", ParamRole::Backbone, &mut w)], &[&[1.0]], &mut AdamState::new(), &cfg).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-6, "{}", w[0]);
    }

    #[test]
    fn gate_lane_scales_step_and_skips_decay() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let (mut a, mut b) = ([0.7], [0.7]);
        let mut st = AdamState::new();
        adam_step(
            &mut [slot("w", ParamRole::Backbone, &mut a), slot("z", ParamRole::Gate, &mut b)],
            &[&[0.3], &[0.3]],
            &mut st,
            &cfg,
        )
        .unwrap();
        let (da, db) = (a[0] - 0.7, b[0] - 0.7);
        assert!((db / da - cfg.gate_lr_multiplier).abs() < 1e-9);

        // With decay on, only the backbone feels it.
        let decayed = AdamConfig {
            weight_decay: 0.5,
            ..cfg
        };
        let (mut a, mut b) = ([2.0], [2.0]);
        adam_step(
            &mut [slot("w", ParamRole::Backbone, &mut a), slot("z", ParamRole::Gate, &mut b)],
            &[&[0.0], &[0.0]],
            &mut AdamState::new(),
            &decayed,
        )
        .unwrap();
        assert!((a[0] - (2.0 - 1e-3 * 0.5 * 2.0)).abs() < 1e-12);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn idle_moments_flush_to_zero() {
        let cfg = AdamConfig::default();
        let mut w = [0.5];
        let mut st = AdamState::new();
        adam_step(&mut [slot("w", ParamRole::Backbone, &mut w)], &[&[1.0]], &mut st, &cfg).unwrap();
        for _ in 0..8000 {
            adam_step(&mut [slot("w", ParamRole::Backbone, &mut w)], &[&[0.0]], &mut st, &cfg).unwrap();
        }
        assert_eq!(st.m[0][0], 0.0);
        assert!(st.v[0][0] > 0.0);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut w = [1.0];
        let err = adam_step(
            &mut [slot("layer3.weight", ParamRole::Backbone, &mut w)],
            &[&[f64::NAN]],
            &mut AdamState::new(),
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer3.weight"));
        assert_eq!(w, [1.0]);
    }
}
