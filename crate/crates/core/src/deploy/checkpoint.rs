//! Binary checkpoint container.
//!
//! Layout: `"SWANCKPT"`, version (`u32` LE), header length (`u32` LE), JSON
//! header, every array as raw `f32` LE in header order, then a CRC32 (`u32`
//! LE) of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prune::{CompactModel, OriginalSize, Provenance};
use crate::data::Normalization;
use crate::error::Result;
use crate::gate::{GateBank, GateKind, GateMode, GateParams, UnitKind};
use crate::model::{GatedModel, Layer, ModelMeta};
use crate::objective::SparsityConfig;
use crate::ops::{BnState, ConvGeom};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SWANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
}

/// Everything persisted alongside the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: GatedModel<f32>,
    pub sparsity: Option<SparsityConfig>,
    pub seed: u64,
    pub epoch: usize,
    pub normalization: Option<Normalization>,
    /// Present when `model` was cut down from a larger one.
    pub compact: Option<CompactInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactInfo {
    pub provenance: Vec<Provenance>,
    pub original: OriginalSize,
    #[serde(default)]
    pub degenerate_layers: Vec<usize>,
}

impl Checkpoint {
    pub fn new(model: GatedModel<f32>, seed: u64, epoch: usize) -> Self {
        Self {
            model,
            sparsity: None,
            seed,
            epoch,
            normalization: None,
            compact: None,
        }
    }

    pub fn from_compact(compact: CompactModel<f32>, seed: u64, epoch: usize) -> Self {
        Self {
            compact: Some(CompactInfo {
                provenance: compact.provenance,
                original: compact.original,
                degenerate_layers: compact.degenerate_layers,
            }),
            ..Self::new(compact.model, seed, epoch)
        }
    }

    pub fn as_compact(&self) -> Option<CompactModel<f32>> {
        self.compact.as_ref().map(|c| CompactModel {
            model: self.model.clone(),
            provenance: c.provenance.clone(),
            original: c.original,
            degenerate_layers: c.degenerate_layers.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LayerDesc {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        geom: ConvGeom,
        bias: bool,
    },
    Batchnorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Gate {
        units: usize,
        source: usize,
        tau: f64,
        mode: GateMode,
        unit_kind: UnitKind,
        gate_kind: GateKind,
        head_features: Option<usize>,
    },
    Relu,
    Pool {
        size: usize,
    },
    Flatten,
    Dropout {
        rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: ModelMeta,
    input_shape: Vec<usize>,
    layers: Vec<LayerDesc>,
    arrays: Vec<ArrayDesc>,
    seed: u64,
    epoch: usize,
    #[serde(default)]
    sparsity: Option<SparsityConfig>,
    #[serde(default)]
    normalization: Option<Normalization>,
    #[serde(default)]
    compact: Option<CompactInfo>,
}

fn describe(model: &GatedModel<f32>) -> (Vec<LayerDesc>, Vec<(String, Vec<usize>, Vec<f32>)>) {
    let mut descs = Vec::new();
    let mut arrays = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let mut push = |name: &str, shape: &[usize], data: &[f32]| {
            arrays.push((format!("layer{i}.{name}"), shape.to_vec(), data.to_vec()));
        };
        let d = match layer {
            Layer::Dense { weight, bias } => {
                push("weight", weight.shape(), weight.data());
                push("bias", bias.shape(), bias.data());
                LayerDesc::Dense {
                    inputs: weight.shape()[1],
                    outputs: weight.shape()[0],
                }
            }
            Layer::Conv { geom, kernels, bias } => {
                push("kernels", kernels.shape(), kernels.data());
                if let Some(b) = bias {
                    push("bias", b.shape(), b.data());
                }
                LayerDesc::Conv {
                    geom: *geom,
                    bias: bias.is_some(),
                }
            }
            Layer::BatchNorm(st) => {
                let c = [st.channels()];
                push("gamma", &c, &st.gamma);
                push("beta", &c, &st.beta);
                push("running_mean", &c, &st.running_mean);
                push("running_var", &c, &st.running_var);
                LayerDesc::Batchnorm {
                    channels: st.channels(),
                    eps: st.eps,
                    momentum: st.momentum,
                }
            }
            Layer::Gate { bank, source } => {
                match &bank.params {
                    GateParams::ContextFree { logits } => push("logits", logits.shape(), logits.data()),
                    GateParams::Conditioned { weight, bias } => {
                        push("head_weight", weight.shape(), weight.data());
                        push("head_bias", bias.shape(), bias.data());
                    }
                }
                LayerDesc::Gate {
                    units: bank.units(),
                    source: *source,
                    tau: bank.tau,
                    mode: bank.mode,
                    unit_kind: bank.kind,
                    gate_kind: bank.gate_kind(),
                    head_features: bank.head_features(),
                }
            }
            Layer::Relu => LayerDesc::Relu,
            Layer::MaxPool { size } => LayerDesc::Pool { size: *size },
            Layer::Flatten => LayerDesc::Flatten,
            Layer::Dropout { rate } => LayerDesc::Dropout { rate: *rate },
        };
        descs.push(d);
    }
    (descs, arrays)
}

fn header(ckpt: &Checkpoint, layers: Vec<LayerDesc>, arrays: &[(String, Vec<usize>, Vec<f32>)]) -> Header {
    Header {
        meta: ckpt.model.meta.clone(),
        input_shape: ckpt.model.input_shape.clone(),
        layers,
        arrays: arrays
            .iter()
            .map(|(name, shape, _)| ArrayDesc {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        sparsity: ckpt.sparsity.clone(),
        normalization: ckpt.normalization.clone(),
        compact: ckpt.compact.clone(),
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let (layers, arrays) = describe(&ckpt.model);
    let header = header(ckpt, layers, &arrays);
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * arrays.iter().map(|a| a.2.len()).sum::<usize>() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &arrays {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            expected: 16,
            actual: bytes.len(),
        });
    }
    let version = le_u32(&bytes[8..12]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = le_u32(&bytes[12..16]) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(CheckpointError::Truncated {
            expected: body,
            actual: bytes.len(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let floats: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    let total = body + 4 * floats + 4;
    if bytes.len() != total {
        if bytes.len() < total {
            return Err(CheckpointError::Truncated {
                expected: total,
                actual: bytes.len(),
            });
        }
        return Err(CheckpointError::MalformedHeader(format!(
            "{} trailing bytes after the checksum",
            bytes.len() - total
        )));
    }
    let stored = le_u32(&bytes[total - 4..]);
    let computed = crc32fast::hash(&bytes[..total - 4]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut at = body;
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let data: Vec<f32> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        at += 4 * n;
        arrays.push(Tensor::new(a.shape.clone(), data).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?);
    }
    let model = rebuild(&header, arrays)?;
    Ok(Checkpoint {
        model,
        sparsity: header.sparsity,
        seed: header.seed,
        epoch: header.epoch,
        normalization: header.normalization,
        compact: header.compact,
    })
}

fn rebuild(header: &Header, arrays: Vec<Tensor<f32>>) -> std::result::Result<GatedModel<f32>, CheckpointError> {
    let malformed = |m: String| CheckpointError::MalformedHeader(m);
    let mut it = arrays.into_iter();
    let mut next = |what: &str, shape: &[usize]| {
        let t = it.next().ok_or_else(|| malformed(format!("missing array for {what}")))?;
        if t.shape() != shape {
            return Err(malformed(format!("{what} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for d in &header.layers {
        let layer = match d {
            LayerDesc::Dense { inputs, outputs } => Layer::Dense {
                weight: next("dense weight", &[*outputs, *inputs])?,
                bias: next("dense bias", &[*outputs])?,
            },
            LayerDesc::Conv { geom, bias } => Layer::Conv {
                geom: *geom,
                kernels: next("conv kernels", &[geom.out_channels, geom.in_channels, geom.kernel, geom.kernel])?,
                bias: if *bias {
                    Some(next("conv bias", &[geom.out_channels])?)
                } else {
                    None
                },
            },
            LayerDesc::Batchnorm { channels, eps, momentum } => {
                let c = [*channels];
                Layer::BatchNorm(BnState {
                    gamma: next("bn gamma", &c)?.into_data(),
                    beta: next("bn beta", &c)?.into_data(),
                    running_mean: next("bn mean", &c)?.into_data(),
                    running_var: next("bn var", &c)?.into_data(),
                    eps: *eps,
                    momentum: *momentum,
                })
            }
            LayerDesc::Gate {
                units,
                source,
                tau,
                mode,
                unit_kind,
                gate_kind,
                head_features,
            } => {
                let params = match (gate_kind, head_features) {
                    (GateKind::ContextFree, _) => GateParams::ContextFree {
                        logits: next("gate logits", &[*units])?,
                    },
                    (GateKind::InputConditioned, Some(f)) => GateParams::Conditioned {
                        weight: next("gate head weight", &[*units, *f])?,
                        bias: next("gate head bias", &[*units])?,
                    },
                    (GateKind::InputConditioned, None) => {
                        return Err(malformed("conditioned gate without head width".into()))
                    }
                };
                Layer::Gate {
                    bank: GateBank {
                        params,
                        tau: *tau,
                        mode: *mode,
                        kind: *unit_kind,
                    },
                    source: *source,
                }
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Pool { size } => Layer::MaxPool { size: *size },
            LayerDesc::Flatten => Layer::Flatten,
            LayerDesc::Dropout { rate } => Layer::Dropout { rate: *rate },
        };
        layers.push(layer);
    }
    if it.next().is_some() {
        return Err(malformed("more arrays than layers need".into()));
    }
    let model = GatedModel {
        layers,
        input_shape: header.input_shape.clone(),
        meta: header.meta.clone(),
    };
    model.shapes().map_err(|e| malformed(e.to_string()))?;
    Ok(model)
}

/// The checkpoint header with every array inlined under `weights`, keyed
/// by array name.
pub fn to_json(ckpt: &Checkpoint) -> serde_json::Value {
    let (layers, arrays) = describe(&ckpt.model);
    let mut value = serde_json::to_value(header(ckpt, layers, &arrays)).expect("header serializes");
    let weights: serde_json::Map<String, serde_json::Value> = arrays
        .into_iter()
        .map(|(name, _, data)| (name, serde_json::Value::from(data)))
        .collect();
    value["weights"] = serde_json::Value::Object(weights);
    value
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(decode(&fs::read(path)?)?)
}
