use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GatedModel, Layer};
use crate::error::{Error, Result};
use crate::gate::{apply_soft_gate, gate_probabilities, pool_features, soft_gate_backward, GateDecision, GateParams};
use crate::ops::conv::{conv2d_backward_raw, conv2d_raw};
use crate::ops::{batchnorm_backward, batchnorm_forward, maxpool2d, maxpool2d_backward, relu, relu_backward};
use crate::ops::{BnCache, BnState, PoolCache};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// How gates act during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    /// Gates ignored.
    Dense,
    /// Activations scaled by `p`.
    Soft,
    /// Activations multiplied by `g`; straight-through when trained.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pass {
    pub mode: ForwardMode,
    /// Batch statistics in BN and random dropout masks.
    pub training: bool,
    /// Seeds dropout masks.
    pub seed: u64,
    /// At inference, keeps each dropout-layer unit with this probability
    /// (rescaled by its inverse) instead of passing everything through.
    pub dropout_keep: Option<f64>,
}

impl Pass {
    pub fn eval(mode: ForwardMode) -> Self {
        Self {
            mode,
            training: false,
            seed: 0,
            dropout_keep: None,
        }
    }

    pub fn train(mode: ForwardMode, seed: u64) -> Self {
        Self {
            mode,
            training: true,
            seed,
            dropout_keep: None,
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Bn { cache: BnCache<T>, updated: Option<BnState<T>> },
    Pool(PoolCache),
    Gate(usize),
    Mask(Vec<T>),
}

/// Everything a backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits.
    pub acts: Vec<Tensor<T>>,
    /// One decision per gate layer, in layer order.
    pub decisions: Vec<GateDecision<T>>,
    caches: Vec<Cache<T>>,
    pub pass: Pass,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds the input")
    }

    /// Gate probabilities of every bank concatenated along the unit axis.
    pub fn gate_probabilities(&self) -> Result<Tensor<T>> {
        concat_units(self.decisions.iter().map(|d| &d.p))
    }

    /// Hard gates of every bank concatenated along the unit axis.
    pub fn hard_gates(&self) -> Result<Tensor<T>> {
        concat_units(self.decisions.iter().map(|d| &d.g))
    }
}

/// Joins `[N_k]` tensors into `[N]`, or `[B, N_k]` tensors into `[B, N]`.
pub(crate) fn concat_units<'a, T: Scalar>(parts: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let parts: Vec<&Tensor<T>> = parts.collect();
    let Some(first) = parts.first() else {
        return Ok(Tensor::new(vec![0], vec![])?);
    };
    if first.ndim() == 1 {
        let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        return Ok(Tensor::from_vec(data));
    }
    let b = first.shape()[0];
    if parts.iter().any(|p| p.ndim() != 2 || p.shape()[0] != b) {
        return Err(Error::dim("gates", "cannot join per-sample and batch-constant gates"));
    }
    let n: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(b * n);
    for row in 0..b {
        for p in &parts {
            let w = p.shape()[1];
            data.extend_from_slice(&p.data()[row * w..(row + 1) * w]);
        }
    }
    Tensor::new(vec![b, n], data)
}

/// Logits and gate decisions of an inference pass.
#[derive(Clone, Debug)]
pub struct Forward<T = f32> {
    pub logits: Tensor<T>,
    pub decisions: Vec<GateDecision<T>>,
}

/// Gradients in the order of [`GatedModel::params_mut`], grouped by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T = f32> {
    pub layers: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn flat(&self) -> impl Iterator<Item = &Vec<T>> {
        self.layers.iter().flatten()
    }

    /// Gradient of the context-free logits (or conditioned-head bias) of the
    /// gate at `layer`.
    pub fn gate(&self, layer: usize) -> Option<&[T]> {
        self.layers.get(layer)?.last().map(Vec::as_slice)
    }
}

fn mask_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn dropout_mask<T: Scalar>(len: usize, keep: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = T::lit(1.0 / keep);
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect()
}

impl<T: Scalar> GatedModel<T> {
    /// Inference pass.
    pub fn forward(&self, x: &Tensor<T>, mode: ForwardMode) -> Result<Forward<T>> {
        let trace = self.trace(x, Pass::eval(mode))?;
        let Trace { mut acts, decisions, .. } = trace;
        Ok(Forward {
            logits: acts.pop().expect("trace holds the logits"),
            decisions,
        })
    }

    /// Forward pass that records what [`GatedModel::backward`] needs.
    pub fn trace(&self, x: &Tensor<T>, pass: Pass) -> Result<Trace<T>> {
        self.run(x, pass, self.layers.len())
    }

    /// Activations entering layers `0..=stop` (the input of layer `stop` last).
    pub fn trace_upto(&self, x: &Tensor<T>, pass: Pass, stop: usize) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(x, pass, stop.min(self.layers.len()))?.acts)
    }

    fn run(&self, x: &Tensor<T>, pass: Pass, stop: usize) -> Result<Trace<T>> {
        let shapes = self.shapes()?;
        let per: usize = self.input_shape.iter().product();
        if x.ndim() == 0 || x.len() != x.shape()[0] * per {
            return Err(Error::dim(
                "forward",
                format!("batch {:?} does not match input shape {:?}", x.shape(), self.input_shape),
            ));
        }
        let b = x.shape()[0];
        let with_batch = |s: &[usize]| [&[b][..], s].concat();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone().reshape(&with_batch(&self.input_shape))?);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut decisions = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().take(stop) {
            let h = acts.last().expect("non-empty");
            let (y, cache) = match layer {
                Layer::Dense { weight, bias } => {
                    let (out, inp) = weight.dims2("dense")?;
                    let mut y = Vec::with_capacity(b * out);
                    for _ in 0..b {
                        y.extend_from_slice(bias.data());
                    }
                    gemm(MatRef::rm(h.data(), b, inp), MatRef::rm(weight.data(), out, inp).t(), T::one(), &mut y);
                    (Tensor::new(vec![b, out], y)?, Cache::None)
                }
                Layer::Conv { geom, kernels, bias } => {
                    let y = conv2d_raw(geom, h.data(), kernels.data(), bias.as_ref().map(|t| t.data()), b);
                    (Tensor::new(with_batch(&shapes[i + 1]), y)?, Cache::None)
                }
                Layer::BatchNorm(state) => {
                    let mut st = state.clone();
                    let (y, cache) = batchnorm_forward(h, &mut st, pass.training)?;
                    let updated = pass.training.then_some(st);
                    (y, Cache::Bn { cache, updated })
                }
                Layer::Gate { bank, source } => {
                    let p = gate_probabilities(bank, Some(&acts[*source]))?;
                    let d = GateDecision::new(p, bank.tau);
                    let y = match pass.mode {
                        ForwardMode::Dense => h.clone(),
                        ForwardMode::Soft => apply_soft_gate(h, &d.p)?,
                        ForwardMode::Hard => apply_soft_gate(h, &d.g)?,
                    };
                    decisions.push(d);
                    (y, Cache::Gate(decisions.len() - 1))
                }
                Layer::Relu => (relu(h), Cache::None),
                Layer::MaxPool { size } => {
                    let (y, cache) = maxpool2d(h, *size)?;
                    (y, Cache::Pool(cache))
                }
                Layer::Flatten => (h.clone().reshape(&with_batch(&shapes[i + 1]))?, Cache::None),
                Layer::Dropout { rate } => {
                    let keep = if pass.training { Some(1.0 - rate) } else { pass.dropout_keep };
                    match keep {
                        Some(k) if k < 1.0 => {
                            let mask: Vec<T> = dropout_mask(h.len(), k, mask_seed(pass.seed, i));
                            let y = h.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                            (Tensor::new(h.shape().to_vec(), y)?, Cache::Mask(mask))
                        }
                        _ => (h.clone(), Cache::None),
                    }
                }
            };
            acts.push(y.finite(layer.name())?);
            caches.push(cache);
        }
        Ok(Trace {
            acts,
            decisions,
            caches,
            pass,
        })
    }

    /// Folds the running statistics gathered by a training pass into the model.
    pub fn commit_bn(&mut self, trace: &Trace<T>) {
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches) {
            if let (Layer::BatchNorm(state), Cache::Bn { updated: Some(st), .. }) = (layer, cache) {
                *state = st.clone();
            }
        }
    }

    /// Backpropagates `grad_logits` through the recorded pass.
    ///
    /// `gate_extra[k]` is added to `dL/dp` of the `k`-th gate bank before the
    /// sigmoid factor (regularizer gradients); pass an empty slice for none.
    /// In hard mode the gates use the straight-through estimator.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &Tensor<T>, gate_extra: &[Tensor<T>]) -> Result<Grads<T>> {
        let n = self.layers.len();
        if trace.acts.len() != n + 1 || grad_logits.shape() != trace.logits().shape() {
            return Err(Error::dim("backward", "trace does not belong to this model"));
        }
        if !gate_extra.is_empty() && gate_extra.len() != trace.decisions.len() {
            return Err(Error::dim(
                "backward",
                format!("{} extra gate gradients for {} banks", gate_extra.len(), trace.decisions.len()),
            ));
        }
        let b = grad_logits.shape()[0];
        let mut grads: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
        let mut pending: Vec<Option<Vec<T>>> = vec![None; n + 1];
        let mut g = grad_logits.clone();
        for i in (0..n).rev() {
            if let Some(extra) = pending[i + 1].take() {
                for (a, e) in g.data_mut().iter_mut().zip(extra) {
                    *a += e;
                }
            }
            let x = &trace.acts[i];
            let gin = match (&self.layers[i], &trace.caches[i]) {
                (Layer::Dense { weight, .. }, _) => {
                    let (out, inp) = weight.dims2("dense")?;
                    let mut gw = vec![T::zero(); out * inp];
                    gemm(MatRef::rm(g.data(), b, out).t(), MatRef::rm(x.data(), b, inp), T::zero(), &mut gw);
                    let mut gb = vec![T::zero(); out];
                    for row in g.data().chunks(out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    let mut gx = vec![T::zero(); b * inp];
                    gemm(MatRef::rm(g.data(), b, out), MatRef::rm(weight.data(), out, inp), T::zero(), &mut gx);
                    grads[i] = vec![gw, gb];
                    Tensor::new(x.shape().to_vec(), gx)?
                }
                (Layer::Conv { geom, kernels, bias }, _) => {
                    let (gx, gk, gb) = conv2d_backward_raw(geom, x.data(), kernels.data(), g.data(), b);
                    grads[i] = if bias.is_some() { vec![gk, gb] } else { vec![gk] };
                    Tensor::new(x.shape().to_vec(), gx)?
                }
                (Layer::BatchNorm(state), Cache::Bn { cache, .. }) => {
                    let (gx, gg, gbeta) = batchnorm_backward(&g, state, cache)?;
                    grads[i] = vec![gg, gbeta];
                    gx
                }
                (Layer::Gate { bank, source }, Cache::Gate(k)) => {
                    let d = &trace.decisions[*k];
                    let (gx, gparams, gfeat) =
                        gate_backward(bank, &trace.acts[*source], x, d, &g, gate_extra.get(*k), trace.pass.mode)?;
                    grads[i] = gparams;
                    if let Some(f) = gfeat {
                        let slot = pending[*source].get_or_insert_with(|| vec![T::zero(); f.len()]);
                        for (a, v) in slot.iter_mut().zip(f) {
                            *a += v;
                        }
                    }
                    gx
                }
                (Layer::Relu, _) => relu_backward(&trace.acts[i + 1], &g)?,
                (Layer::MaxPool { .. }, Cache::Pool(cache)) => maxpool2d_backward(&g, cache)?,
                (Layer::Flatten, _) => g.reshape(x.shape())?,
                (Layer::Dropout { .. }, Cache::Mask(mask)) => {
                    let d = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    Tensor::new(x.shape().to_vec(), d)?
                }
                (Layer::Dropout { .. }, _) => g,
                (l, _) => return Err(Error::config(format!("trace cache does not match layer {i} ({})", l.name()))),
            };
            g = gin.finite(self.layers[i].name())?;
        }
        Ok(Grads { layers: grads })
    }
}

type GateGrads<T> = (Tensor<T>, Vec<Vec<T>>, Option<Vec<T>>);

/// Returns `(dL/dh, parameter gradients, dL/dfeatures of a conditioned head)`.
fn gate_backward<T: Scalar>(
    bank: &crate::gate::GateBank<T>,
    features: &Tensor<T>,
    h: &Tensor<T>,
    d: &GateDecision<T>,
    up: &Tensor<T>,
    extra: Option<&Tensor<T>>,
    mode: ForwardMode,
) -> Result<GateGrads<T>> {
    let zero_params = || match &bank.params {
        GateParams::ContextFree { logits } => vec![vec![T::zero(); logits.len()]],
        GateParams::Conditioned { weight, bias } => vec![vec![T::zero(); weight.len()], vec![T::zero(); bias.len()]],
    };
    if mode == ForwardMode::Dense {
        return Ok((up.clone(), zero_params(), None));
    }
    let (dh_soft, mut dp) = soft_gate_backward(h, &d.p, up)?;
    let dh = match mode {
        ForwardMode::Hard => apply_soft_gate(up, &d.g)?,
        _ => dh_soft,
    };
    if let Some(e) = extra {
        if e.shape() != dp.shape() {
            return Err(Error::dim("backward", format!("extra gate gradient {:?} for {:?}", e.shape(), dp.shape())));
        }
        for (a, &v) in dp.data_mut().iter_mut().zip(e.data()) {
            *a += v;
        }
    }
    let dz: Vec<T> = dp
        .data()
        .iter()
        .zip(d.p.data())
        .map(|(&g, &p)| g * p * (T::one() - p))
        .collect();
    match &bank.params {
        GateParams::ContextFree { .. } => Ok((dh, vec![dz], None)),
        GateParams::Conditioned { weight, .. } => {
            let pooled = pool_features(features)?;
            let (b, f) = pooled.dims2("gate head")?;
            let n = weight.shape()[0];
            let mut gw = vec![T::zero(); n * f];
            gemm(MatRef::rm(&dz, b, n).t(), MatRef::rm(pooled.data(), b, f), T::zero(), &mut gw);
            let mut gb = vec![T::zero(); n];
            for row in dz.chunks(n) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let mut gpool = vec![T::zero(); b * f];
            gemm(MatRef::rm(&dz, b, n), MatRef::rm(weight.data(), n, f), T::zero(), &mut gpool);
            let area = features.len() / (b * f).max(1);
            let inv = T::lit(1.0 / area as f64);
            let mut gfeat = Vec::with_capacity(features.len());
            for v in gpool {
                gfeat.extend(std::iter::repeat_n(v * inv, area));
            }
            Ok((dh, vec![gw, gb], Some(gfeat)))
        }
    }
}
