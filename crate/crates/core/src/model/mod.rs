//! Gated architectures as an ordered layer list.
//!
//! Gates are explicit layers. A gate layer scales the units produced by its
//! `source` (the nearest preceding dense or conv layer); only batch-norm and
//! ReLU may sit between the two. Activations keep units on axis 1.

mod build;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateBank, GateKind, GateParams};
use crate::objective::CostVector;
use crate::ops::{BnState, ConvGeom};
use crate::tensor::{Scalar, Tensor};

pub use build::{build, build_mlp, build_smallcnn, Architecture, CnnSpec, GateConfig};
pub use forward::{Forward, ForwardMode, Grads, Pass, Trace};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    /// `y = x W^T + b` with `weight [out, in]`.
    Dense { weight: Tensor<T>, bias: Tensor<T> },
    Conv {
        geom: ConvGeom,
        kernels: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm(BnState<T>),
    Gate { bank: GateBank<T>, source: usize },
    Relu,
    MaxPool { size: usize },
    Flatten,
    Dropout { rate: f64 },
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv { .. } => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Gate { .. } => "gate",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "pool",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
        }
    }

    /// Units produced by a dense or conv layer.
    pub fn out_units(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } => Some(weight.shape()[0]),
            Layer::Conv { geom, .. } => Some(geom.out_channels),
            _ => None,
        }
    }
}

/// Whether a parameter belongs to the backbone or to a gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Backbone,
    Gate,
}

/// Mutable view of one trainable array.
#[derive(Debug)]
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub role: ParamRole,
    pub data: &'a mut [T],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub architecture: String,
    pub seed: u64,
    pub version: u32,
}

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GatedModel<T = f32> {
    pub layers: Vec<Layer<T>>,
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub meta: ModelMeta,
}

impl<T: Scalar> GatedModel<T> {
    /// Per-sample shapes at every point of the graph: entry `i` is the input
    /// of layer `i`, the last entry the logits. Fails on any incompatibility.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let s = shapes.last().expect("non-empty");
            let bad = |detail: String| Error::config(format!("layer {i} ({}): {detail}", layer.name()));
            let next = match layer {
                Layer::Dense { weight, bias } => {
                    let (out, inp) = weight.dims2("dense")?;
                    let fan_in: usize = s.iter().product();
                    if s.len() != 1 || fan_in != inp {
                        return Err(bad(format!("expects [{inp}], got {s:?}")));
                    }
                    if bias.len() != out {
                        return Err(bad(format!("bias of {} for {out} units", bias.len())));
                    }
                    vec![out]
                }
                Layer::Conv { geom, kernels, bias } => {
                    geom.validate()?;
                    if s.as_slice() != [geom.in_channels, geom.in_h, geom.in_w] {
                        return Err(bad(format!(
                            "expects [{}, {}, {}], got {s:?}",
                            geom.in_channels, geom.in_h, geom.in_w
                        )));
                    }
                    if kernels.shape() != [geom.out_channels, geom.in_channels, geom.kernel, geom.kernel] {
                        return Err(bad(format!("kernel shape {:?}", kernels.shape())));
                    }
                    if bias.as_ref().is_some_and(|b| b.len() != geom.out_channels) {
                        return Err(bad("bias length".into()));
                    }
                    vec![geom.out_channels, geom.out_h(), geom.out_w()]
                }
                Layer::BatchNorm(st) => {
                    if s.first() != Some(&st.channels()) {
                        return Err(bad(format!("{} channels for input {s:?}", st.channels())));
                    }
                    s.clone()
                }
                Layer::Gate { bank, source } => {
                    self.check_gate(i, bank, *source, s, &shapes)?;
                    s.clone()
                }
                Layer::Relu | Layer::Dropout { .. } => s.clone(),
                Layer::MaxPool { size } => {
                    let &[c, h, w] = s.as_slice() else {
                        return Err(bad(format!("expects [C, H, W], got {s:?}")));
                    };
                    if *size == 0 || h < *size || w < *size {
                        return Err(bad(format!("window {size} does not fit {h}x{w}")));
                    }
                    vec![c, h / size, w / size]
                }
                Layer::Flatten => vec![s.iter().product()],
            };
            if let Layer::Dropout { rate } = layer {
                if !(0.0..1.0).contains(rate) {
                    return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
            shapes.push(next);
        }
        Ok(shapes)
    }

    fn check_gate(
        &self,
        i: usize,
        bank: &GateBank<T>,
        source: usize,
        s: &[usize],
        shapes: &[Vec<usize>],
    ) -> Result<()> {
        let bad = |detail: String| Error::config(format!("gate layer {i}: {detail}"));
        let Some(units) = self.layers.get(source).and_then(|l| l.out_units()).filter(|_| source < i) else {
            return Err(bad(format!("source {source} is not a preceding dense or conv layer")));
        };
        for between in &self.layers[source + 1..i] {
            if !matches!(between, Layer::BatchNorm(_) | Layer::Relu) {
                return Err(bad(format!("{} between source and gate", between.name())));
            }
        }
        if bank.units() != units || s.first() != Some(&units) {
            return Err(bad(format!("{} gates for {units} units", bank.units())));
        }
        if let Some(f) = bank.head_features() {
            if shapes[source].first() != Some(&f) {
                return Err(bad(format!("head reads {f} features, source input is {:?}", shapes[source])));
            }
        }
        let finite = match &bank.params {
            GateParams::ContextFree { logits } => logits.is_finite(),
            GateParams::Conditioned { weight, bias } => weight.is_finite() && bias.is_finite(),
        };
        if !finite {
            return Err(bad("uninitialized (non-finite) gate parameters".into()));
        }
        Ok(())
    }

    /// Output width of the final layer.
    pub fn classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("non-empty").iter().product())
    }

    pub fn gate_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Gate { .. }))
            .collect()
    }

    pub fn gate_banks(&self) -> impl Iterator<Item = (usize, &GateBank<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Gate { bank, .. } => Some((i, bank)),
            _ => None,
        })
    }

    pub fn gate_count(&self) -> usize {
        self.gate_banks().map(|(_, b)| b.units()).sum()
    }

    /// The common kind of every bank; `None` without gates.
    pub fn gate_kind(&self) -> Result<Option<GateKind>> {
        let mut kinds = self.gate_banks().map(|(_, b)| b.gate_kind());
        let first = kinds.next();
        if kinds.any(|k| Some(k) != first) {
            return Err(Error::config("mixed context-free and input-conditioned gates"));
        }
        Ok(first)
    }

    /// Dense FLOPs of every layer (zero for all but dense and conv layers).
    pub fn layer_flops(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, .. } => 2.0 * weight.len() as f64,
                Layer::Conv { geom, .. } => {
                    2.0 * (geom.patch_len() * geom.out_channels * geom.out_area()) as f64
                }
                _ => 0.0,
            })
            .collect()
    }

    pub fn dense_flops(&self) -> f64 {
        self.layer_flops().iter().sum()
    }

    /// Marginal cost of every gated unit in gate order, normalized against
    /// the model's dense FLOPs.
    pub fn cost_vector(&self) -> CostVector {
        let flops = self.layer_flops();
        let mut costs = Vec::with_capacity(self.gate_count());
        for l in &self.layers {
            if let Layer::Gate { bank, source } = l {
                let per_unit = flops[*source] / bank.units() as f64;
                costs.extend(std::iter::repeat_n(per_unit, bank.units()));
            }
        }
        CostVector {
            costs,
            total_dense_flops: flops.iter().sum(),
        }
    }

    /// FLOPs of layers that no gate can switch off.
    pub fn ungated_flops(&self) -> f64 {
        let flops = self.layer_flops();
        let gated: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Gate { source, .. } => Some(*source),
                _ => None,
            })
            .collect();
        (0..self.layers.len()).filter(|i| !gated.contains(i)).map(|i| flops[i]).sum()
    }

    /// Trainable backbone parameter count (gate parameters excluded).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(layer_params).sum()
    }

    /// Backbone parameters of the given layers.
    pub fn params_in(&self, layers: &[usize]) -> usize {
        layers.iter().map(|&i| layer_params(&self.layers[i])).sum()
    }

    /// Indices of layers feeding a gate.
    pub fn gated_sources(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Gate { source, .. } => Some(*source),
                _ => None,
            })
            .collect()
    }

    /// Every trainable array in a fixed order (layer by layer).
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut push = |name: &str, role, data| slot(&mut out, i, name, role, data);
            match layer {
                Layer::Dense { weight, bias } => {
                    push("weight", ParamRole::Backbone, weight.data_mut());
                    push("bias", ParamRole::Backbone, bias.data_mut());
                }
                Layer::Conv { kernels, bias, .. } => {
                    push("kernels", ParamRole::Backbone, kernels.data_mut());
                    if let Some(b) = bias {
                        push("bias", ParamRole::Backbone, b.data_mut());
                    }
                }
                Layer::BatchNorm(st) => {
                    push("gamma", ParamRole::Backbone, &mut st.gamma);
                    push("beta", ParamRole::Backbone, &mut st.beta);
                }
                Layer::Gate { bank, .. } => match &mut bank.params {
                    GateParams::ContextFree { logits } => push("logits", ParamRole::Gate, logits.data_mut()),
                    GateParams::Conditioned { weight, bias } => {
                        push("head_weight", ParamRole::Gate, weight.data_mut());
                        push("head_bias", ParamRole::Gate, bias.data_mut());
                    }
                },
                _ => {}
            }
        }
        out
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> GatedModel<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::lit(a.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::Conv { geom, kernels, bias } => Layer::Conv {
                    geom: *geom,
                    kernels: kernels.cast(),
                    bias: bias.as_ref().map(Tensor::cast),
                },
                Layer::BatchNorm(st) => Layer::BatchNorm(BnState {
                    running_mean: v(&st.running_mean),
                    running_var: v(&st.running_var),
                    gamma: v(&st.gamma),
                    beta: v(&st.beta),
                    eps: st.eps,
                    momentum: st.momentum,
                }),
                Layer::Gate { bank, source } => Layer::Gate {
                    bank: GateBank {
                        params: match &bank.params {
                            GateParams::ContextFree { logits } => GateParams::ContextFree { logits: logits.cast() },
                            GateParams::Conditioned { weight, bias } => GateParams::Conditioned {
                                weight: weight.cast(),
                                bias: bias.cast(),
                            },
                        },
                        tau: bank.tau,
                        mode: bank.mode,
                        kind: bank.kind,
                    },
                    source: *source,
                },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { size } => Layer::MaxPool { size: *size },
                Layer::Flatten => Layer::Flatten,
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
            })
            .collect();
        GatedModel {
            layers,
            input_shape: self.input_shape.clone(),
            meta: self.meta.clone(),
        }
    }
}

fn slot<'a, T>(out: &mut Vec<ParamSlot<'a, T>>, layer: usize, name: &str, role: ParamRole, data: &'a mut [T]) {
    out.push(ParamSlot {
        name: format!("layer{layer}.{name}"),
        role,
        data,
    });
}

fn layer_params<T: Scalar>(l: &Layer<T>) -> usize {
    match l {
        Layer::Dense { weight, bias } => weight.len() + bias.len(),
        Layer::Conv { kernels, bias, .. } => kernels.len() + bias.as_ref().map_or(0, Tensor::len),
        Layer::BatchNorm(st) => 2 * st.channels(),
        _ => 0,
    }
}
