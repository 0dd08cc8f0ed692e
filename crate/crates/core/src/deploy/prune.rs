use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::gate::{gate_probabilities, GateBank, GateKind, GateParams};
use crate::model::{ForwardMode, GatedModel, Layer};
use crate::tensor::{Scalar, Tensor};

/// Default share of calibration inputs a conditioned unit must be active on
/// to survive pruning is `1 - DEFAULT_KEEP_QUANTILE`.
pub const DEFAULT_KEEP_QUANTILE: f64 = 0.99;

/// Which original units a compact layer kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the producing layer in the original model.
    pub original_layer: usize,
    /// Index of the same layer in the compact model.
    pub compact_layer: usize,
    /// `kept[j]` is the original index of compact unit `j`.
    pub kept: Vec<usize>,
}

/// Size of the model a compact model was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalSize {
    pub dense_flops: f64,
    pub params: usize,
    /// FLOPs and parameters of the layers that carried gates.
    pub gated_flops: f64,
    pub gated_params: usize,
}

impl OriginalSize {
    pub fn of<T: Scalar>(model: &GatedModel<T>, gated: &[usize]) -> Self {
        let flops = model.layer_flops();
        Self {
            dense_flops: model.dense_flops(),
            params: model.param_count(),
            gated_flops: gated.iter().map(|&i| flops[i]).sum(),
            gated_params: model.params_in(gated),
        }
    }
}

/// A network with closed units physically removed.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactModel<T = f32> {
    pub model: GatedModel<T>,
    pub provenance: Vec<Provenance>,
    pub original: OriginalSize,
    /// Layers left with no open unit, kept alive through their best unit.
    pub degenerate_layers: Vec<usize>,
}

/// Layers whose units can be removed: gate sources if the model has gates,
/// otherwise every dense or conv layer except the last one.
pub fn prunable_layers<T: Scalar>(model: &GatedModel<T>) -> Vec<usize> {
    let gated = model.gated_sources();
    if !gated.is_empty() {
        return gated;
    }
    let producers: Vec<usize> = (0..model.layers.len())
        .filter(|&i| model.layers[i].out_units().is_some())
        .collect();
    producers[..producers.len().saturating_sub(1)].to_vec()
}

/// Per-unit share of `calibration` inputs on which each conditioned gate is open.
fn open_rates<T: Scalar>(model: &GatedModel<T>, calibration: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let banks = model.gate_banks().count();
    let mut counts: Vec<Vec<f64>> = model.gate_banks().map(|(_, b)| vec![0.0; b.units()]).collect();
    for idx in batch_indices(calibration.len(), batch, None) {
        let (x, _) = calibration.batch(&idx);
        let out = model.forward(&x.cast(), ForwardMode::Hard)?;
        for (k, d) in out.decisions.iter().enumerate().take(banks) {
            let n = counts[k].len();
            for row in d.g.data().chunks(n) {
                for (c, &g) in counts[k].iter_mut().zip(row) {
                    *c += g.as_f64();
                }
            }
        }
    }
    let total = calibration.len() as f64;
    Ok(counts.into_iter().map(|c| c.into_iter().map(|v| v / total).collect()).collect())
}

/// Keep sets for the gate sources of `model`, thresholding context-free gates
/// at `tau` and conditioned gates by their open rate on `calibration`.
pub fn gate_keep_sets<T: Scalar>(
    model: &GatedModel<T>,
    tau: f64,
    calibration: Option<&Dataset>,
    keep_quantile: f64,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut scores = BTreeMap::new();
    match model.gate_kind()? {
        None => {}
        Some(GateKind::ContextFree) => {
            for l in &model.layers {
                if let Layer::Gate { bank, source } = l {
                    let p = gate_probabilities(bank, None)?;
                    scores.insert(*source, p.data().iter().map(|v| v.as_f64() - tau).collect());
                }
            }
        }
        Some(GateKind::InputConditioned) => {
            let cal = calibration
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::config("pruning input-conditioned gates needs calibration data"))?;
            let rates = open_rates(model, cal, 256)?;
            let floor = 1.0 - keep_quantile;
            for (s, r) in model.gated_sources().into_iter().zip(rates) {
                scores.insert(s, r.into_iter().map(|v| v - floor).collect());
            }
        }
    }
    Ok(scores)
}

/// Turns signed scores (keep where `> 0`, or `>= 0` for thresholds) into
/// index sets, keeping the single best unit of an all-closed layer.
fn keep_from_scores(scores: &BTreeMap<usize, Vec<f64>>, inclusive: bool) -> (BTreeMap<usize, Vec<usize>>, Vec<usize>) {
    let mut keep = BTreeMap::new();
    let mut degenerate = Vec::new();
    for (&layer, s) in scores {
        let mut k: Vec<usize> = (0..s.len())
            .filter(|&i| if inclusive { s[i] >= 0.0 } else { s[i] > 0.0 })
            .collect();
        if k.is_empty() && !s.is_empty() {
            let best = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
            log::warn!("every unit of layer {layer} is closed; keeping unit {best} to preserve connectivity");
            degenerate.push(layer);
            k.push(best);
        }
        keep.insert(layer, k);
    }
    (keep, degenerate)
}

/// Removes every unit whose gate is closed and drops context-free gate layers.
///
/// Context-free gates close where `p < tau`. Input-conditioned gates need
/// `calibration`: a unit is removed when it is open on at most
/// `1 - keep_quantile` of the calibration inputs; surviving conditioned gates
/// stay in the compact model and keep deciding per input.
pub fn prune_to_compact<T: Scalar>(
    model: &GatedModel<T>,
    tau: f64,
    calibration: Option<&Dataset>,
    keep_quantile: f64,
) -> Result<CompactModel<T>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("pruning threshold {tau} must lie in (0, 1)")));
    }
    let scores = gate_keep_sets(model, tau, calibration, keep_quantile)?;
    let inclusive = model.gate_kind()? != Some(GateKind::InputConditioned);
    let (keep, degenerate) = keep_from_scores(&scores, inclusive);
    let mut compact = slice_units(model, &keep)?;
    compact.degenerate_layers = degenerate;
    Ok(compact)
}

fn pick_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    t.gather_rows(rows)
}

/// Keeps axis-1 indices `cols` of a `[R, C, ...]` tensor.
fn pick_axis1<T: Scalar>(t: &Tensor<T>, cols: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let (r, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(r * cols.len() * inner);
    for row in 0..r {
        for &j in cols {
            data.extend_from_slice(&t.data()[(row * c + j) * inner..][..inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = cols.len();
    Tensor::new(shape, data).expect("sliced shape")
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn slice_bank<T: Scalar>(bank: &GateBank<T>, units: &[usize], features: Option<&[usize]>) -> GateBank<T> {
    let params = match &bank.params {
        GateParams::ContextFree { logits } => GateParams::ContextFree {
            logits: Tensor::from_vec(pick(logits.data(), units)),
        },
        GateParams::Conditioned { weight, bias } => {
            let w = pick_rows(weight, units);
            GateParams::Conditioned {
                weight: match features {
                    Some(f) => pick_axis1(&w, f),
                    None => w,
                },
                bias: Tensor::from_vec(pick(bias.data(), units)),
            }
        }
    };
    GateBank { params, ..bank.clone() }
}

/// Cuts the model down to the given units of each producing layer (keyed by
/// layer index) and slices every downstream consumer to match. Context-free
/// gates are removed; conditioned gates are sliced and kept.
pub fn slice_units<T: Scalar>(model: &GatedModel<T>, keep: &BTreeMap<usize, Vec<usize>>) -> Result<CompactModel<T>> {
    let shapes = model.shapes()?;
    for (&l, k) in keep {
        let units = model.layers.get(l).and_then(|x| x.out_units()).ok_or_else(|| {
            Error::config(format!("layer {l} does not produce prunable units"))
        })?;
        if k.is_empty() || k.iter().any(|&i| i >= units) || k.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("keep set for layer {l} must be strictly increasing, non-empty and within {units}")));
        }
    }
    let gated = prunable_layers(model);
    let original = OriginalSize::of(model, &gated);
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut new_index = vec![usize::MAX; model.layers.len()];
    let mut provenance = Vec::new();
    // Surviving indices along the unit axis of the current activation.
    let mut live: Option<Vec<usize>> = None;
    // Surviving input indices of every layer, for conditioned gate heads.
    let mut input_live: Vec<Option<Vec<usize>>> = vec![None; model.layers.len()];
    for (i, layer) in model.layers.iter().enumerate() {
        input_live[i] = live.clone();
        let out_keep = keep.get(&i);
        let next = match layer {
            Layer::Dense { weight, bias } => {
                let mut w = weight.clone();
                if let Some(cols) = &live {
                    w = pick_axis1(&w, cols);
                }
                let mut b = bias.clone();
                if let Some(rows) = out_keep {
                    w = pick_rows(&w, rows);
                    b = Tensor::from_vec(pick(b.data(), rows));
                }
                live = out_keep.cloned();
                Some(Layer::Dense { weight: w, bias: b })
            }
            Layer::Conv { geom, kernels, bias } => {
                let mut k = kernels.clone();
                let mut g = *geom;
                if let Some(cin) = &live {
                    k = pick_axis1(&k, cin);
                    g.in_channels = cin.len();
                }
                let mut b = bias.clone();
                if let Some(rows) = out_keep {
                    k = pick_rows(&k, rows);
                    b = b.map(|t| Tensor::from_vec(pick(t.data(), rows)));
                    g.out_channels = rows.len();
                }
                live = out_keep.cloned();
                Some(Layer::Conv {
                    geom: g,
                    kernels: k,
                    bias: b,
                })
            }
            Layer::BatchNorm(st) => Some(Layer::BatchNorm(match &live {
                Some(k) => st.keep_channels(k),
                None => st.clone(),
            })),
            Layer::Gate { bank, source } => match bank.gate_kind() {
                GateKind::ContextFree => None,
                GateKind::InputConditioned => {
                    let units: Vec<usize> = match &live {
                        Some(k) => k.clone(),
                        None => (0..bank.units()).collect(),
                    };
                    Some(Layer::Gate {
                        bank: slice_bank(bank, &units, input_live[*source].as_deref()),
                        source: new_index[*source],
                    })
                }
            },
            Layer::Flatten => {
                if let Some(ch) = &live {
                    let area: usize = shapes[i][1..].iter().product();
                    live = Some(ch.iter().flat_map(|&c| c * area..(c + 1) * area).collect());
                }
                Some(Layer::Flatten)
            }
            other => Some(other.clone()),
        };
        if let Some(l) = next {
            new_index[i] = layers.len();
            if let Some(k) = out_keep {
                provenance.push(Provenance {
                    original_layer: i,
                    compact_layer: layers.len(),
                    kept: k.clone(),
                });
            }
            layers.push(l);
        }
    }
    let compact = GatedModel {
        layers,
        input_shape: model.input_shape.clone(),
        meta: model.meta.clone(),
    };
    compact.shapes()?;
    Ok(CompactModel {
        model: compact,
        provenance,
        original,
        degenerate_layers: Vec::new(),
    })
}
