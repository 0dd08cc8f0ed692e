use std::fmt;

use serde::Serialize;

use super::prune::{prunable_layers, CompactModel, OriginalSize};
use crate::gate::{gate_probabilities, hard_gate, GateKind};
use crate::model::{GatedModel, Layer};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    pub flops: f64,
    pub params: usize,
}

/// FLOPs and parameter accounting relative to the dense original.
///
/// Dense units cost `2 * fan_in` FLOPs and conv channels `2 * k^2 * C_in * H' * W'`;
/// only dense and conv layers are counted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub dense_flops: f64,
    pub effective_flops: f64,
    pub flops_fraction: f64,
    pub params: usize,
    pub original_params: usize,
    pub params_fraction: f64,
    pub gated_flops_fraction: f64,
    pub gated_params_fraction: f64,
    pub layers: Vec<LayerCost>,
}

fn layer_costs<T: Scalar>(model: &GatedModel<T>) -> Vec<LayerCost> {
    let flops = model.layer_flops();
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.out_units().is_some() || matches!(l, Layer::BatchNorm(_)))
        .map(|(i, l)| LayerCost {
            index: i,
            kind: l.name(),
            flops: flops[i],
            params: model.params_in(&[i]),
        })
        .collect()
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        1.0
    }
}

/// Report for a model that has not been pruned. With context-free gates the
/// effective FLOPs count only units whose gate is open; input-conditioned
/// gates are input dependent, so their model is reported at dense cost.
pub fn flops_report<T: Scalar>(model: &GatedModel<T>) -> FlopsReport {
    let dense = model.dense_flops();
    let params = model.param_count();
    let effective = match model.gate_kind() {
        Ok(Some(GateKind::ContextFree)) => {
            let costs = model.cost_vector();
            let mut open = Vec::with_capacity(costs.len());
            for (_, bank) in model.gate_banks() {
                let p = gate_probabilities(bank, None).expect("context-free gates");
                open.extend(hard_gate(&p, bank.tau).data().iter().map(|g| g.as_f64()));
            }
            model.ungated_flops() + costs.costs.iter().zip(open).map(|(c, g)| c * g).sum::<f64>()
        }
        _ => dense,
    };
    let gated = model.gated_sources();
    let flops = model.layer_flops();
    let gated_flops: f64 = gated.iter().map(|&i| flops[i]).sum();
    let gated_effective = gated_flops - (dense - effective);
    FlopsReport {
        dense_flops: dense,
        effective_flops: effective,
        flops_fraction: ratio(effective, dense),
        params,
        original_params: params,
        params_fraction: 1.0,
        gated_flops_fraction: ratio(gated_effective, gated_flops),
        gated_params_fraction: 1.0,
        layers: layer_costs(model),
    }
}

/// Report for a compact model against the model it was cut from.
pub fn compact_flops_report<T: Scalar>(compact: &CompactModel<T>) -> FlopsReport {
    let m = &compact.model;
    let o: &OriginalSize = &compact.original;
    let flops = m.layer_flops();
    let gated: Vec<usize> = compact.provenance.iter().map(|p| p.compact_layer).collect();
    let effective = m.dense_flops();
    let params = m.param_count();
    FlopsReport {
        dense_flops: o.dense_flops,
        effective_flops: effective,
        flops_fraction: ratio(effective, o.dense_flops),
        params,
        original_params: o.params,
        params_fraction: ratio(params as f64, o.params as f64),
        gated_flops_fraction: ratio(gated.iter().map(|&i| flops[i]).sum(), o.gated_flops),
        gated_params_fraction: ratio(m.params_in(&gated) as f64, o.gated_params as f64),
        layers: layer_costs(m),
    }
}

/// Size of `model` as an original, for models without a recorded history.
pub fn original_size<T: Scalar>(model: &GatedModel<T>) -> OriginalSize {
    OriginalSize::of(model, &prunable_layers(model))
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dense FLOPs        {:.0}", self.dense_flops)?;
        writeln!(f, "effective FLOPs    {:.0} ({:.4})", self.effective_flops, self.flops_fraction)?;
        writeln!(
            f,
            "parameters         {} of {} ({:.4})",
            self.params, self.original_params, self.params_fraction
        )?;
        writeln!(f, "gated-layer FLOPs  {:.4}", self.gated_flops_fraction)?;
        writeln!(f, "gated-layer params {:.4}", self.gated_params_fraction)?;
        for l in &self.layers {
            writeln!(f, "  layer {:>2} {:<9} flops {:>12.0} params {:>8}", l.index, l.kind, l.flops, l.params)?;
        }
        Ok(())
    }
}

impl FlopsReport {
    /// CSV with one row per counted layer followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,flops,params\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{},{}\n", l.index, l.kind, l.flops, l.params));
        }
        out.push_str(&format!("total,all,{},{}\n", self.effective_flops, self.params));
        out
    }
}
