//! WebAssembly bindings behind `www/index.html`: gate response, regularizer
//! schedules and regularizer values for a hand-edited set of gate logits.
//!
//! Build with `wasm-pack build crates/web --target web --out-dir www/pkg`.

use swan_core::gate::sigmoid_clamped;
use swan_core::objective::{
    cosine_ramp, expected_active_fraction, flops_penalty, l0_proxy, target_penalty, CostVector,
};
use swan_core::Tensor;
use wasm_bindgen::prelude::*;

/// `[p, hard gate, straight-through slope p(1-p)]` for one logit.
#[wasm_bindgen]
pub fn gate(z: f64, tau: f64) -> Vec<f64> {
    let p = sigmoid_clamped(z);
    let g = if p >= tau { 1.0 } else { 0.0 };
    vec![p, g, p * (1.0 - p)]
}

/// Ramp values at `n` evenly spaced epochs in `[0, t_max]`.
#[wasm_bindgen]
pub fn ramp_curve(delay: f64, length: f64, t_max: f64, n: usize) -> Vec<f64> {
    let step = if n > 1 { t_max / (n - 1) as f64 } else { 0.0 };
    (0..n).map(|i| cosine_ramp(i as f64 * step, delay, length)).collect()
}

/// `[R0, RF, alpha, RT, hard active fraction]` for gate logits `z` with
/// per-unit costs. Costs are normalized by their sum.
#[wasm_bindgen]
pub fn regularizers(z: &[f64], costs: &[f64], target: f64, tau: f64) -> Result<Vec<f64>, JsError> {
    if z.is_empty() || z.len() != costs.len() {
        return Err(JsError::new("need one cost per gate"));
    }
    let p: Vec<f64> = z.iter().map(|&v| sigmoid_clamped(v)).collect();
    let probs: Tensor<f64> = Tensor::from_f64(&[p.len()], &p).map_err(|e| JsError::new(&e.to_string()))?;
    let costs = CostVector {
        costs: costs.to_vec(),
        total_dense_flops: costs.iter().sum(),
    };
    let r0 = l0_proxy(&probs).map_err(|e| JsError::new(&e.to_string()))?;
    let rf = flops_penalty(&probs, &costs).map_err(|e| JsError::new(&e.to_string()))?;
    let alpha = expected_active_fraction(&probs).map_err(|e| JsError::new(&e.to_string()))?;
    let hard = p.iter().filter(|&&v| v >= tau).count() as f64 / p.len() as f64;
    Ok(vec![r0, rf, alpha, target_penalty(alpha, target), hard])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_at_zero_logit() {
        assert_eq!(gate(0.0, 0.5), vec![0.5, 1.0, 0.25]);
        assert_eq!(gate(-0.1, 0.5)[1], 0.0);
    }

    #[test]
    fn ramp_curve_spans_zero_to_one() {
        let c = ramp_curve(2.0, 4.0, 8.0, 9);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[2], 0.0);
        assert_eq!(c[4], 0.5);
        assert_eq!(c[8], 1.0);
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }
}
