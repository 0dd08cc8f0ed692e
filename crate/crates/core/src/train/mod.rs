//! Adam training with scheduled sparsity pressure, per-epoch evaluation and
//! an append-only metrics log.

mod adam;
mod eval;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::model::{ForwardMode, GatedModel, Layer, Pass};
use crate::objective::{composite_loss, regularizer_grad, LossTerms, SparsityConfig};
use crate::ops::{argmax_rows, softmax_cross_entropy};
use crate::tensor::{Scalar, Tensor};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, evaluate_pass, EvalReport, EVAL_BATCH};
pub use metrics::{EpochMetrics, MetricsLog};

/// Which forward mode gates use while training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GateSchedule {
    /// Gates ignored; regularizers have no effect.
    Dense,
    #[default]
    AlwaysSoft,
    AlwaysSte,
    /// Soft before `epoch`, straight-through from `epoch` on (1-based).
    SoftThenSte { epoch: usize },
}

impl GateSchedule {
    pub fn mode_at(&self, epoch: usize) -> ForwardMode {
        match *self {
            GateSchedule::Dense => ForwardMode::Dense,
            GateSchedule::AlwaysSoft => ForwardMode::Soft,
            GateSchedule::AlwaysSte => ForwardMode::Hard,
            GateSchedule::SoftThenSte { epoch: e } if epoch >= e => ForwardMode::Hard,
            GateSchedule::SoftThenSte { .. } => ForwardMode::Soft,
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `floor * lr` at the last batch.
    Cosine {
        #[serde(default)]
        floor: f64,
    },
}

fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_gate_lr_multiplier() -> f64 {
    10.0
}
fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_gate_lr_multiplier")]
    pub gate_lr_multiplier: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Set from the run's top-level seed.
    #[serde(skip, default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub schedule: GateSchedule,
    #[serde(default)]
    pub lr_decay: LrDecay,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: default_batch_size(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            gate_lr_multiplier: default_gate_lr_multiplier(),
            weight_decay: 0.0,
            seed: default_seed(),
            schedule: GateSchedule::default(),
            lr_decay: LrDecay::Constant,
        }
    }

    /// Learning rate at fractional epoch `t` in `[0, epochs)`.
    pub fn lr_at(&self, t: f64) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine { floor } => {
                let frac = (t / self.epochs as f64).clamp(0.0, 1.0);
                self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            gate_lr_multiplier: self.gate_lr_multiplier,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(self.gate_lr_multiplier > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("gate_lr_multiplier must be positive and weight_decay non-negative"));
        }
        if let LrDecay::Cosine { floor } = self.lr_decay {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::config(format!("cosine lr floor {floor} must lie in [0, 1]")));
            }
        }
        if let GateSchedule::SoftThenSte { epoch: 0 } = self.schedule {
            return Err(Error::config("soft-then-ste switch epoch is 1-based"));
        }
        Ok(())
    }
}

/// Result of a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// Epoch with the best hard-mode validation accuracy (first on ties).
    pub best_epoch: usize,
}

/// Called after every epoch with the updated model and its metrics.
pub type EpochHook<'a, T> = dyn FnMut(&GatedModel<T>, &EpochMetrics) -> Result<()> + 'a;

fn epoch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407) ^ (batch as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25);
    x ^= x >> 29;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Splits `[N]` or `[B, N]` along the unit axis into pieces of `widths`.
fn split_units<T: Scalar>(t: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let n: usize = widths.iter().sum();
    let rows = if t.ndim() == 1 { 1 } else { t.shape()[0] };
    let mut out = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &w in widths {
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * n + off..r * n + off + w]);
        }
        let shape = if t.ndim() == 1 { vec![w] } else { vec![rows, w] };
        out.push(Tensor::new(shape, data)?);
        off += w;
    }
    Ok(out)
}

fn set_gate_mode<T: Scalar>(model: &mut GatedModel<T>, mode: ForwardMode) {
    let m = match mode {
        ForwardMode::Hard => GateMode::HardSte,
        _ => GateMode::Soft,
    };
    for layer in &mut model.layers {
        if let Layer::Gate { bank, .. } = layer {
            bank.mode = m;
        }
    }
}

/// Trains `model` in place on `train`, evaluating on `val` after each epoch.
///
/// Regularizer weights follow `sparsity` at fractional epoch
/// `t = (epoch - 1) + batch / batches`. A non-finite loss or gradient stops
/// the run with [`Error::Divergence`] before the offending update is applied.
pub fn train<T: Scalar>(
    model: &mut GatedModel<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    sparsity: &SparsityConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sparsity.validate()?;
    model.shapes()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    let costs = model.cost_vector();
    let widths: Vec<usize> = model.gate_banks().map(|(_, b)| b.units()).collect();
    let mut adam = cfg.adam();
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);

    for epoch in 1..=cfg.epochs {
        let mode = cfg.schedule.mode_at(epoch);
        set_gate_mode(model, mode);
        let batches = batch_indices(train.len(), cfg.batch_size, Some(epoch_seed(cfg.seed, epoch, 0)));
        let nb = batches.len() as f64;
        let mut sums = LossTerms::default();
        let mut correct = 0usize;
        let diverged = |detail: String| Error::Divergence { epoch, detail };

        for (bi, idx) in batches.iter().enumerate() {
            let t = (epoch - 1) as f64 + bi as f64 / nb;
            adam.lr = cfg.lr_at(t);
            let (x, labels) = train.batch(idx);
            let trace = model.trace(&x.cast(), Pass::train(mode, epoch_seed(cfg.seed, epoch, bi + 1)));
            let trace = trace.map_err(|e| diverged(e.to_string()))?;
            let (task, grad_logits) = softmax_cross_entropy(trace.logits(), &labels).map_err(|e| diverged(e.to_string()))?;
            correct += argmax_rows(trace.logits()).iter().zip(&labels).filter(|(a, b)| a == b).count();

            let (terms, extra) = if mode == ForwardMode::Dense || widths.is_empty() {
                (
                    LossTerms {
                        task: task.as_f64(),
                        ..Default::default()
                    },
                    Vec::new(),
                )
            } else {
                let p = trace.gate_probabilities()?;
                let terms = composite_loss(task.as_f64(), &p, &costs, sparsity, t).map_err(|e| diverged(e.to_string()))?;
                let g = regularizer_grad(&p, &costs, sparsity, t)?;
                (terms, split_units(&g, &widths)?)
            };
            if !terms.total().is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            let grads = model.backward(&trace, &grad_logits, &extra).map_err(|e| diverged(e.to_string()))?;
            model.commit_bn(&trace);
            let flat: Vec<&[T]> = grads.flat().map(Vec::as_slice).collect();
            adam_step(&mut model.params_mut(), &flat, &mut state, &adam).map_err(|e| diverged(e.to_string()))?;

            let w = idx.len() as f64;
            sums.task += terms.task * w;
            sums.l0 += terms.l0 * w;
            sums.flops += terms.flops * w;
            sums.target += terms.target * w;
        }

        let n = train.len() as f64;
        let soft = evaluate(model, val, ForwardMode::Soft)?;
        let hard = evaluate(model, val, ForwardMode::Hard)?;
        let m = EpochMetrics {
            epoch,
            train_loss: (sums.task + sums.l0 + sums.flops + sums.target) / n,
            train_task_loss: sums.task / n,
            train_l0_term: sums.l0 / n,
            train_flops_term: sums.flops / n,
            train_target_term: sums.target / n,
            train_acc: correct as f64 / n,
            val_loss: hard.loss,
            val_acc_soft: soft.accuracy,
            val_acc_hard: hard.accuracy,
            active_fraction_soft: soft.active_fraction,
            active_fraction_hard: hard.active_fraction,
            expected_flops_fraction: hard.expected_flops_fraction,
        };
        log::info!(
            "epoch {epoch:>3} loss {:.4} val hard {:.4} soft {:.4} active {:.4}",
            m.train_loss,
            m.val_acc_hard,
            m.val_acc_soft,
            m.active_fraction_hard
        );
        if m.val_acc_hard > best.1 {
            best = (epoch, m.val_acc_hard);
        }
        hook(model, &m)?;
        history.push(m);
    }
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
    })
}
