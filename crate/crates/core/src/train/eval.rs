use serde::Serialize;

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, GatedModel, Pass};
use crate::ops::{argmax_rows, softmax_cross_entropy};
use crate::tensor::Scalar;

pub const EVAL_BATCH: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean hard gate over units and samples; 1 without gates or in dense mode.
    pub active_fraction: f64,
    /// Realized FLOPs over dense FLOPs. Only hard mode skips work, so soft and
    /// dense passes report 1.
    pub flops_fraction: f64,
    /// FLOPs fraction with every gated unit weighted by its mean probability.
    pub expected_flops_fraction: f64,
}

/// Loss, accuracy and compute of `model` on `data` in `mode`.
pub fn evaluate<T: Scalar>(model: &GatedModel<T>, data: &Dataset, mode: ForwardMode) -> Result<EvalReport> {
    evaluate_pass(model, data, Pass::eval(mode))
}

/// [`evaluate`] with full control over the inference pass.
pub fn evaluate_pass<T: Scalar>(model: &GatedModel<T>, data: &Dataset, pass: Pass) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("evaluate: empty dataset"));
    }
    let costs = model.cost_vector();
    let units = costs.len();
    let mut g_sum = vec![0.0; units];
    let mut p_sum = vec![0.0; units];
    let (mut loss, mut correct) = (0.0, 0usize);
    for idx in batch_indices(data.len(), EVAL_BATCH, None) {
        let (x, labels) = data.batch(&idx);
        let trace = model.trace(&x.cast(), pass)?;
        let (l, _) = softmax_cross_entropy(trace.logits(), &labels)?;
        let b = idx.len();
        loss += l.as_f64() * b as f64;
        correct += argmax_rows(trace.logits()).iter().zip(&labels).filter(|(a, b)| a == b).count();
        if units > 0 {
            let (p, g) = (trace.gate_probabilities()?, trace.hard_gates()?);
            // `[N]` gates hold for the whole batch.
            let weight = if p.ndim() == 1 { b as f64 } else { 1.0 };
            for (k, (pv, gv)) in p.data().iter().zip(g.data()).enumerate() {
                p_sum[k % units] += pv.as_f64() * weight;
                g_sum[k % units] += gv.as_f64() * weight;
            }
        }
    }
    let n = data.len() as f64;
    let dense = model.dense_flops();
    let ungated = model.ungated_flops();
    let weighted = |sums: &[f64]| -> f64 {
        let gated: f64 = costs.costs.iter().zip(sums).map(|(c, s)| c * s / n).sum();
        if dense > 0.0 {
            (ungated + gated) / dense
        } else {
            1.0
        }
    };
    let gated_fraction = if units > 0 {
        g_sum.iter().sum::<f64>() / (n * units as f64)
    } else {
        1.0
    };
    let (active_fraction, flops_fraction) = match pass.mode {
        ForwardMode::Dense => (1.0, 1.0),
        ForwardMode::Soft => (gated_fraction, 1.0),
        ForwardMode::Hard if units > 0 => (gated_fraction, weighted(&g_sum)),
        ForwardMode::Hard => (1.0, 1.0),
    };
    Ok(EvalReport {
        samples: data.len(),
        loss: loss / n,
        accuracy: correct as f64 / n,
        active_fraction,
        flops_fraction,
        expected_flops_fraction: if units > 0 { weighted(&p_sum) } else { 1.0 },
    })
}
