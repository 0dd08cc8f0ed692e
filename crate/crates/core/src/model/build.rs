use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GatedModel, Layer, ModelMeta, MODEL_VERSION};
use crate::error::{Error, Result};
use crate::gate::{GateBank, GateKind, UnitKind, DEFAULT_INIT_LOGIT};
use crate::ops::{BnState, ConvGeom};
use crate::tensor::{Scalar, Tensor};

fn default_true() -> bool {
    true
}

fn default_init_logit() -> f64 {
    DEFAULT_INIT_LOGIT
}

fn default_tau() -> f64 {
    0.5
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Without gates the builders return a plain network.
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "GateConfig::default_kind")]
    pub kind: GateKind,
    #[serde(default = "default_init_logit")]
    pub init_logit: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl GateConfig {
    fn default_kind() -> GateKind {
        GateKind::ContextFree
    }

    pub fn none() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kind: GateKind::ContextFree,
            init_logit: DEFAULT_INIT_LOGIT,
            tau: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum Architecture {
    Mlp {
        widths: Vec<usize>,
        #[serde(default)]
        dropout: Option<f64>,
    },
    SmallCnn(CnnSpec),
}

/// Builds the configured architecture with weights drawn from `seed`.
pub fn build<T: Scalar>(arch: &Architecture, gates: &GateConfig, seed: u64) -> Result<GatedModel<T>> {
    match arch {
        Architecture::Mlp { widths, dropout } => build_mlp(widths, gates, *dropout, seed),
        Architecture::SmallCnn(spec) => build_smallcnn(spec, gates, seed),
    }
}

fn he<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn gate_layer<T: Scalar>(
    gates: &GateConfig,
    units: usize,
    features: usize,
    kind: UnitKind,
    source: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Layer<T>> {
    let bank = match gates.kind {
        GateKind::ContextFree => GateBank::context_free(units, gates.init_logit, gates.tau, kind)?,
        GateKind::InputConditioned => GateBank::conditioned(units, features, gates.init_logit, gates.tau, kind, rng)?,
    };
    Ok(Layer::Gate { bank, source })
}

/// Fully connected network over `widths`, with per-neuron gates after the
/// ReLU of every hidden layer and optional dropout after each gate.
pub fn build_mlp<T: Scalar>(
    widths: &[usize],
    gates: &GateConfig,
    dropout: Option<f64>,
    seed: u64,
) -> Result<GatedModel<T>> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::config(format!("an MLP needs at least two positive widths, got {widths:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (k, pair) in widths.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        let source = layers.len();
        layers.push(Layer::Dense {
            weight: he(&[out, inp], inp, &mut rng),
            bias: Tensor::zeros(&[out]),
        });
        if k + 2 < widths.len() {
            layers.push(Layer::Relu);
            if gates.enabled {
                layers.push(gate_layer(gates, out, inp, UnitKind::Neuron, source, &mut rng)?);
            }
            if let Some(rate) = dropout {
                layers.push(Layer::Dropout { rate });
            }
        }
    }
    let model = GatedModel {
        layers,
        input_shape: vec![widths[0]],
        meta: ModelMeta {
            architecture: format!(
                "mlp-{}",
                widths.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
            ),
            seed,
            version: MODEL_VERSION,
        },
    };
    model.shapes()?;
    Ok(model)
}

/// Conv-BN-ReLU blocks (same padding) with per-channel gates, each followed by
/// 2x2 max pooling, then a dense classifier.
pub fn build_smallcnn<T: Scalar>(spec: &CnnSpec, gates: &GateConfig, seed: u64) -> Result<GatedModel<T>> {
    let [c0, mut h, mut w] = spec.input;
    if spec.channels.is_empty() || spec.channels.contains(&0) || c0 == 0 || spec.classes < 2 {
        return Err(Error::config("small CNN needs positive channel widths and at least two classes"));
    }
    if spec.kernel % 2 == 0 {
        return Err(Error::config(format!("kernel {} must be odd for same padding", spec.kernel)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cin = c0;
    for (k, &cout) in spec.channels.iter().enumerate() {
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "block {k} sees a {h}x{w} map; {} pooling stages do not fit {:?}",
                spec.channels.len(),
                spec.input
            )));
        }
        let geom = ConvGeom {
            in_channels: cin,
            out_channels: cout,
            kernel: spec.kernel,
            stride: 1,
            pad: spec.kernel / 2,
            in_h: h,
            in_w: w,
        };
        let source = layers.len();
        layers.push(Layer::Conv {
            geom,
            kernels: he(&[cout, cin, spec.kernel, spec.kernel], geom.patch_len(), &mut rng),
            bias: None,
        });
        layers.push(Layer::BatchNorm(BnState::new(cout)));
        layers.push(Layer::Relu);
        if gates.enabled {
            layers.push(gate_layer(gates, cout, cin, UnitKind::Channel, source, &mut rng)?);
        }
        layers.push(Layer::MaxPool { size: 2 });
        (h, w, cin) = (h / 2, w / 2, cout);
    }
    let feat = cin * h * w;
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense {
        weight: he(&[spec.classes, feat], feat, &mut rng),
        bias: Tensor::zeros(&[spec.classes]),
    });
    let model = GatedModel {
        layers,
        input_shape: spec.input.to_vec(),
        meta: ModelMeta {
            architecture: format!(
                "smallcnn-{}",
                spec.channels.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
            ),
            seed,
            version: MODEL_VERSION,
        },
    };
    model.shapes()?;
    Ok(model)
}
