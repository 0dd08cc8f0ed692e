//! Sparsity and compute regularizers, their delayed cosine schedules, and the
//! composite training objective.
//!
//! Gate probabilities enter either as `[N]` (batch-constant, context-free
//! gates) or `[B, N]` (one row per sample). Batch averages use `1/B`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Delay `d` and length `r` of a cosine ramp, both in epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ramp {
    pub delay: f64,
    pub length: f64,
}

impl Ramp {
    pub const IMMEDIATE: Ramp = Ramp { delay: 0.0, length: 0.0 };

    pub fn at(&self, t: f64) -> f64 {
        cosine_ramp(t, self.delay, self.length)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub lambda_l0: f64,
    pub lambda_flops: f64,
    pub lambda_target: f64,
    /// Target active fraction `alpha*` in `(0, 1]`.
    pub target_active: f64,
    pub l0_ramp: Ramp,
    /// Defaults to `l0_ramp` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_ramp: Option<Ramp>,
    pub target_ramp: Ramp,
    pub tau: f64,
}

impl SparsityConfig {
    /// All regularizers off.
    pub fn disabled(tau: f64) -> Self {
        Self {
            lambda_l0: 0.0,
            lambda_flops: 0.0,
            lambda_target: 0.0,
            target_active: 1.0,
            l0_ramp: Ramp::IMMEDIATE,
            flops_ramp: None,
            target_ramp: Ramp::IMMEDIATE,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l0", self.lambda_l0),
            ("lambda_flops", self.lambda_flops),
            ("lambda_target", self.lambda_target),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.target_active > 0.0 && self.target_active <= 1.0) {
            return Err(Error::config(format!(
                "target_active must lie in (0, 1], got {}",
                self.target_active
            )));
        }
        for r in [Some(self.l0_ramp), self.flops_ramp, Some(self.target_ramp)].into_iter().flatten() {
            if !(r.delay >= 0.0 && r.length >= 0.0) {
                return Err(Error::config("ramp delay and length must be non-negative"));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    pub fn flops_ramp(&self) -> Ramp {
        self.flops_ramp.unwrap_or(self.l0_ramp)
    }

    /// Ramped coefficients `(lambda_0(t), lambda_F(t), lambda_T(t))`.
    pub fn weights_at(&self, t: f64) -> (f64, f64, f64) {
        (
            self.lambda_l0 * self.l0_ramp.at(t),
            self.lambda_flops * self.flops_ramp().at(t),
            self.lambda_target * self.target_ramp.at(t),
        )
    }

    /// Earliest epoch at which any regularizer can be non-zero.
    pub fn earliest_onset(&self) -> f64 {
        [self.l0_ramp.delay, self.flops_ramp().delay, self.target_ramp.delay]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Epoch from which every regularizer is at full strength.
    pub fn fully_ramped(&self) -> f64 {
        [self.l0_ramp, self.flops_ramp(), self.target_ramp]
            .into_iter()
            .map(|r| r.delay + r.length)
            .fold(0.0, f64::max)
    }
}

/// Per-unit marginal FLOPs, one entry per gated unit in model order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    pub costs: Vec<f64>,
    /// Dense FLOPs of the whole model; normalizes the penalty.
    pub total_dense_flops: f64,
}

impl CostVector {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.costs.iter().map(|c| c / self.total_dense_flops).collect()
    }
}

/// `(batch, units)`; `batch == 0` marks a batch-constant `[N]` tensor.
fn rows_units<T: Scalar>(p: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match p.shape() {
        &[n] => Ok((0, n)),
        &[b, n] => Ok((b, n)),
        s => Err(Error::dim(op, format!("gate probabilities must be [N] or [B, N], got {s:?}"))),
    }
}

/// Sum over units of the batch mean of `p_i * w_i`.
fn weighted_mean<T: Scalar>(p: &Tensor<T>, w: impl Fn(usize) -> f64, op: &'static str) -> Result<f64> {
    let (b, n) = rows_units(p, op)?;
    let pd = p.data();
    if b == 0 {
        return Ok((0..n).map(|i| pd[i].as_f64() * w(i)).sum());
    }
    let mut total = 0.0;
    for row in pd.chunks(n.max(1)).take(b) {
        for (i, v) in row.iter().enumerate() {
            total += v.as_f64() * w(i);
        }
    }
    Ok(if b == 0 { 0.0 } else { total / b as f64 })
}

/// L0 proxy: expected number of active units, `(1/B) sum_x sum_i p_i(x)`.
pub fn l0_proxy<T: Scalar>(p: &Tensor<T>) -> Result<f64> {
    weighted_mean(p, |_| 1.0, "l0_proxy")
}

/// Expected normalized compute, `(1/B) sum_x sum_i p_i(x) c_i / total`.
pub fn flops_penalty<T: Scalar>(p: &Tensor<T>, costs: &CostVector) -> Result<f64> {
    let (_, n) = rows_units(p, "flops_penalty")?;
    if n != costs.len() {
        return Err(Error::config(format!(
            "cost vector has {} entries for {} gates",
            costs.len(),
            n
        )));
    }
    let c = costs.normalized();
    weighted_mean(p, |i| c[i], "flops_penalty")
}

/// Mean gate probability over units and batch.
pub fn expected_active_fraction<T: Scalar>(p: &Tensor<T>) -> Result<f64> {
    let (_, n) = rows_units(p, "expected_active_fraction")?;
    if n == 0 {
        return Err(Error::config("expected active fraction of zero gates"));
    }
    Ok(l0_proxy(p)? / n as f64)
}

/// One-sided quadratic `max(0, alpha - target)^2`.
pub fn target_penalty(alpha: f64, target: f64) -> f64 {
    let excess = (alpha - target).max(0.0);
    excess * excess
}

/// Delayed half-cosine ramp from 0 (for `t <= d`) to 1 (for `t >= d + r`).
/// With `r == 0` the ramp steps to 1 immediately after `d`.
pub fn cosine_ramp(t: f64, d: f64, r: f64) -> f64 {
    if t <= d {
        return 0.0;
    }
    let frac = if r > 0.0 { ((t - d) / r).min(1.0) } else { 1.0 };
    if frac >= 1.0 {
        return 1.0;
    }
    // Same curve as (1 - cos(pi f)) / 2, written so f = 1/2 gives exactly 0.5.
    0.5 + 0.5 * (PI * (frac - 0.5)).sin()
}

/// Weighted objective terms at one point in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub task: f64,
    /// `lambda_0(t) * R_0`
    pub l0: f64,
    /// `lambda_F(t) * R_F`
    pub flops: f64,
    /// `lambda_T(t) * R_T`
    pub target: f64,
    /// Expected active fraction `alpha` behind the target term.
    pub alpha: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.task + self.l0 + self.flops + self.target
    }
}

/// Task loss plus the ramped L0, FLOPs and target-activity penalties.
pub fn composite_loss<T: Scalar>(
    task_loss: f64,
    p: &Tensor<T>,
    costs: &CostVector,
    cfg: &SparsityConfig,
    t: f64,
) -> Result<LossTerms> {
    if !task_loss.is_finite() {
        return Err(Error::Numeric("composite_loss: task term".into()));
    }
    let (w0, wf, wt) = cfg.weights_at(t);
    let mut terms = LossTerms {
        task: task_loss,
        ..Default::default()
    };
    if p.is_empty() {
        return Ok(terms);
    }
    terms.alpha = expected_active_fraction(p)?;
    terms.l0 = w0 * l0_proxy(p)?;
    terms.flops = if wf > 0.0 { wf * flops_penalty(p, costs)? } else { 0.0 };
    terms.target = wt * target_penalty(terms.alpha, cfg.target_active);
    for (name, v) in [("L0 term", terms.l0), ("FLOPs term", terms.flops), ("target term", terms.target)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("composite_loss: {name}")));
        }
    }
    Ok(terms)
}

/// Gradient of the ramped regularizers with respect to `p` (same shape as `p`).
pub fn regularizer_grad<T: Scalar>(
    p: &Tensor<T>,
    costs: &CostVector,
    cfg: &SparsityConfig,
    t: f64,
) -> Result<Tensor<T>> {
    let (b, n) = rows_units(p, "regularizer_grad")?;
    if p.is_empty() {
        return Ok(p.clone());
    }
    let (w0, wf, wt) = cfg.weights_at(t);
    let c = if wf > 0.0 {
        if costs.len() != n {
            return Err(Error::config(format!("cost vector has {} entries for {} gates", costs.len(), n)));
        }
        costs.normalized()
    } else {
        vec![0.0; n]
    };
    let alpha = expected_active_fraction(p)?;
    let target = 2.0 * wt * (alpha - cfg.target_active).max(0.0) / n as f64;
    let per_row = if b == 0 { 1.0 } else { 1.0 / b as f64 };
    let row: Vec<T> = (0..n).map(|i| T::lit((w0 + wf * c[i] + target) * per_row)).collect();
    let data = if b == 0 { row } else { row.repeat(b) };
    Tensor::new(p.shape().to_vec(), data)
}

/// The four addends of a gate logit's credit: usefulness, L0 pressure,
/// compute pressure and target-activity pressure.
///
/// `usefulness` is already a logit-space quantity. The three pressure terms
/// are the regularizers' derivatives with respect to the gate probability;
/// [`CreditTerms::logit_gradient`] applies the sigmoid factor to them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditTerms {
    pub usefulness: f64,
    pub l0: f64,
    pub flops: f64,
    pub target: f64,
}

impl CreditTerms {
    pub fn sum(&self) -> f64 {
        self.usefulness + self.l0 + self.flops + self.target
    }

    /// Exact `dL/dz` for a gate with probability `p`.
    pub fn logit_gradient(&self, p: f64) -> f64 {
        self.usefulness + p * (1.0 - p) * (self.l0 + self.flops + self.target)
    }
}

/// Coefficients at which [`credit_decomposition`] is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditWeights {
    pub lambda_l0: f64,
    pub lambda_flops: f64,
    pub lambda_target: f64,
    pub target_active: f64,
}

impl CreditWeights {
    pub fn ramped(cfg: &SparsityConfig, t: f64) -> Self {
        let (lambda_l0, lambda_flops, lambda_target) = cfg.weights_at(t);
        Self {
            lambda_l0,
            lambda_flops,
            lambda_target,
            target_active: cfg.target_active,
        }
    }
}

/// Splits the gradient reaching one gate logit into its four sources.
///
/// `inner` is the batch-summed `<dL/dh~_i, h_i>`, `p` the gate probability,
/// `cost` the normalized unit cost, `alpha` the expected active fraction and
/// `n_gates` the total gate count.
pub fn credit_decomposition(
    inner: f64,
    p: f64,
    cost: f64,
    alpha: f64,
    n_gates: usize,
    w: &CreditWeights,
) -> CreditTerms {
    CreditTerms {
        usefulness: inner * p * (1.0 - p),
        l0: w.lambda_l0,
        flops: w.lambda_flops * cost,
        target: 2.0 * w.lambda_target / n_gates as f64 * (alpha - w.target_active).max(0.0),
    }
}
