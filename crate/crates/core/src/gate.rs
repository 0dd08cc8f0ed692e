//! Per-unit gates: probabilities, hard thresholding, soft scaling and the
//! straight-through estimator.
//!
//! A gate probability is `p = sigmoid(z)`, clamped to `[1e-7, 1 - 1e-7]`. The
//! hard decision is `g = 1[p >= tau]`. Probabilities are either one per unit
//! (`[N]`, context-free logits) or one per sample and unit (`[B, N]`, produced by
//! an input-conditioned head). Activations carry units on axis 1:
//! `[B, N]` for neurons and `[B, N, H, W]` for channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Lower clamp of every gate probability; the upper clamp is `1 - PROB_FLOOR`.
pub const PROB_FLOOR: f64 = 1e-7;

/// Default logit, `sigmoid(3) ~ 0.953`: gates start nearly open.
pub const DEFAULT_INIT_LOGIT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    Soft,
    HardSte,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    Neuron,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    ContextFree,
    InputConditioned,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateParams<T> {
    /// One learnable logit per unit, `[N]`.
    ContextFree { logits: Tensor<T> },
    /// `z = W * pool(features) + b` with `W [N, F]`, `b [N]`.
    Conditioned { weight: Tensor<T>, bias: Tensor<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateBank<T = f32> {
    pub params: GateParams<T>,
    pub tau: f64,
    pub mode: GateMode,
    pub kind: UnitKind,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("gate threshold {tau} must lie in (0, 1)")))
    }
}

impl<T: Scalar> GateBank<T> {
    pub fn context_free(units: usize, init_logit: f64, tau: f64, kind: UnitKind) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            params: GateParams::ContextFree {
                logits: Tensor::full(&[units], T::lit(init_logit)),
            },
            tau,
            mode: GateMode::Soft,
            kind,
        })
    }

    /// Input-conditioned head over `features` pooled inputs. Weights start small
    /// and the bias at `init_logit`, so the head begins nearly open for any input.
    pub fn conditioned<R: Rng>(
        units: usize,
        features: usize,
        init_logit: f64,
        tau: f64,
        kind: UnitKind,
        rng: &mut R,
    ) -> Result<Self> {
        check_tau(tau)?;
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let w: Vec<T> = (0..units * features).map(|_| T::lit(normal.sample(rng))).collect();
        Ok(Self {
            params: GateParams::Conditioned {
                weight: Tensor::new(vec![units, features], w)?,
                bias: Tensor::full(&[units], T::lit(init_logit)),
            },
            tau,
            mode: GateMode::Soft,
            kind,
        })
    }

    pub fn units(&self) -> usize {
        match &self.params {
            GateParams::ContextFree { logits } => logits.len(),
            GateParams::Conditioned { bias, .. } => bias.len(),
        }
    }

    pub fn gate_kind(&self) -> GateKind {
        match self.params {
            GateParams::ContextFree { .. } => GateKind::ContextFree,
            GateParams::Conditioned { .. } => GateKind::InputConditioned,
        }
    }

    /// Number of pooled input features the conditioned head reads.
    pub fn head_features(&self) -> Option<usize> {
        match &self.params {
            GateParams::ContextFree { .. } => None,
            GateParams::Conditioned { weight, .. } => Some(weight.shape()[1]),
        }
    }
}

pub fn sigmoid_clamped(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Averages `[B, F, ...]` over its trailing spatial axes, giving `[B, F]`.
pub(crate) fn pool_features<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() < 2 {
        return Err(Error::dim("gate_probabilities", format!("features {s:?} need a batch axis")));
    }
    let (b, f) = (s[0], s[1]);
    let area: usize = s[2..].iter().product();
    if area == 1 {
        return features.clone().reshape(&[b, f]);
    }
    let inv = T::lit(1.0 / area as f64);
    let pooled = features
        .data()
        .chunks(area)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![b, f], pooled)
}

/// Gate logits `z`: `[N]` for context-free banks, `[B, N]` for conditioned ones.
pub fn gate_logits<T: Scalar>(bank: &GateBank<T>, features: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match &bank.params {
        GateParams::ContextFree { logits } => Ok(logits.clone()),
        GateParams::Conditioned { weight, bias } => {
            let feats = features.ok_or_else(|| {
                Error::config("input-conditioned gates need the layer's input features")
            })?;
            let pooled = pool_features(feats)?;
            let (b, f) = pooled.dims2("gate_probabilities")?;
            let n = bias.len();
            if weight.shape() != [n, f] {
                return Err(Error::dim(
                    "gate_probabilities",
                    format!("head {:?} cannot read {} pooled features", weight.shape(), f),
                ));
            }
            let mut z = vec![T::zero(); b * n];
            for row in z.chunks_mut(n) {
                row.copy_from_slice(bias.data());
            }
            gemm(
                MatRef::rm(pooled.data(), b, f),
                MatRef::rm(weight.data(), n, f).t(),
                T::one(),
                &mut z,
            );
            Tensor::new(vec![b, n], z)
        }
    }
}

/// `p = sigmoid(z)` with the documented clamp.
pub fn gate_probabilities<T: Scalar>(bank: &GateBank<T>, features: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    Ok(gate_logits(bank, features)?.map(|z| T::lit(sigmoid_clamped(z.as_f64()))))
}

/// `g = 1[p >= tau]`.
pub fn hard_gate<T: Scalar>(p: &Tensor<T>, tau: f64) -> Tensor<T> {
    p.map(|v| if v.as_f64() >= tau { T::one() } else { T::zero() })
}

/// Probabilities together with their hard decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision<T = f32> {
    pub p: Tensor<T>,
    pub g: Tensor<T>,
    pub active_fraction: f64,
}

impl<T: Scalar> GateDecision<T> {
    pub fn new(p: Tensor<T>, tau: f64) -> Self {
        let g = hard_gate(&p, tau);
        let active_fraction = if g.is_empty() {
            0.0
        } else {
            g.sum().as_f64() / g.len() as f64
        };
        Self { p, g, active_fraction }
    }
}

/// Mean of the hard gates (over units, and over the batch when per-sample).
pub fn active_fraction<T: Scalar>(decision: &GateDecision<T>) -> Result<f64> {
    if decision.g.is_empty() {
        return Err(Error::config("active fraction of an empty gate set"));
    }
    Ok(decision.g.sum().as_f64() / decision.g.len() as f64)
}

/// `(batch, units, spatial)` of an activation, checked against `p`.
fn layout<T: Scalar>(h: &Tensor<T>, p: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = h.shape();
    if s.len() < 2 {
        return Err(Error::dim(op, format!("activation {s:?} has no unit axis")));
    }
    let (b, n) = (s[0], s[1]);
    let area: usize = s[2..].iter().product();
    let ok = match p.shape() {
        [pn] => *pn == n,
        [pb, pn] => *pb == b && *pn == n,
        _ => false,
    };
    if !ok {
        return Err(Error::dim(
            op,
            format!("gate shape {:?} does not match unit axis of {:?}", p.shape(), s),
        ));
    }
    Ok((b, n, area))
}

fn gate_index(per_sample: bool, b: usize, n: usize, i: usize) -> usize {
    if per_sample {
        b * n + i
    } else {
        i
    }
}

/// Multiplies each unit of `h` by its gate value `m` (probability or 0/1).
fn scale_units<T: Scalar>(h: &Tensor<T>, m: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let (b, n, area) = layout(h, m, op)?;
    let per_sample = m.ndim() == 2;
    let mut out = h.data().to_vec();
    for bi in 0..b {
        for i in 0..n {
            let v = m.data()[gate_index(per_sample, bi, n, i)];
            for x in &mut out[(bi * n + i) * area..][..area] {
                *x *= v;
            }
        }
    }
    Tensor::new(h.shape().to_vec(), out)
}

/// Sums `upstream * h` over each unit's spatial extent; shape follows `p`
/// (also summed over the batch when `p` is `[N]`).
fn unit_inner<T: Scalar>(h: &Tensor<T>, p: &Tensor<T>, upstream: &Tensor<T>, op: &'static str) -> Result<Vec<T>> {
    let (b, n, area) = layout(h, p, op)?;
    if upstream.shape() != h.shape() {
        return Err(Error::dim(op, format!("upstream {:?} vs activation {:?}", upstream.shape(), h.shape())));
    }
    let per_sample = p.ndim() == 2;
    let mut acc = vec![T::zero(); p.len()];
    for bi in 0..b {
        for i in 0..n {
            let off = (bi * n + i) * area;
            let mut s = T::zero();
            for (u, x) in upstream.data()[off..off + area].iter().zip(&h.data()[off..off + area]) {
                s += *u * *x;
            }
            acc[gate_index(per_sample, bi, n, i)] += s;
        }
    }
    Ok(acc)
}

/// Soft gating `h~ = p * h`.
pub fn apply_soft_gate<T: Scalar>(h: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    scale_units(h, p, "apply_soft_gate")
}

/// Gradients of [`apply_soft_gate`] with respect to `h` and `p`.
pub fn soft_gate_backward<T: Scalar>(
    h: &Tensor<T>,
    p: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dp = unit_inner(h, p, upstream, "soft_gate_backward")?;
    let dh = scale_units(upstream, p, "soft_gate_backward")?;
    Ok((dh, Tensor::new(p.shape().to_vec(), dp)?))
}

/// Hard forward `g * h` with `g = hard_gate(p, tau)`; also returns `g`.
pub fn apply_ste_gate<T: Scalar>(h: &Tensor<T>, p: &Tensor<T>, tau: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = hard_gate(p, tau);
    Ok((scale_units(h, &g, "apply_ste_gate")?, g))
}

/// Straight-through backward of [`apply_ste_gate`]: the hard gate is treated
/// as its probability, so `dL/dz = sum(upstream * h) * p * (1 - p)` while the
/// activation gradient stays masked by `g`. Returns `(dh, dz)`.
pub fn ste_gate_backward<T: Scalar>(
    h: &Tensor<T>,
    p: &Tensor<T>,
    g: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if g.shape() != p.shape() {
        return Err(Error::dim("ste_gate_backward", "hard gates and probabilities differ in shape"));
    }
    let inner = unit_inner(h, p, upstream, "ste_gate_backward")?;
    let dz = inner
        .iter()
        .zip(p.data())
        .map(|(&s, &pv)| s * pv * (T::one() - pv))
        .collect();
    let dh = scale_units(upstream, g, "ste_gate_backward")?;
    Ok((dh, Tensor::new(p.shape().to_vec(), dz)?))
}
