//! Dropout and magnitude channel-pruning baselines, and the matched-budget
//! comparison against SWAN.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::DataSplits;
use crate::deploy::{compact_flops_report, gate_keep_sets, slice_units, CompactModel};
use crate::deploy::prunable_layers;
use crate::error::{Error, Result};
use crate::model::{build, Architecture, ForwardMode, GateConfig, GatedModel, Layer, Pass};
use crate::objective::SparsityConfig;
use crate::tensor::Scalar;
use crate::train::{evaluate, evaluate_pass, train, GateSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dropout,
    CpRaw,
    Cp,
    SwanRaw,
    Swan,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dropout, Method::CpRaw, Method::Cp, Method::SwanRaw, Method::Swan];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dropout => "dropout",
            Method::CpRaw => "cp-raw",
            Method::Cp => "cp",
            Method::SwanRaw => "swan-raw",
            Method::Swan => "swan",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(method, budget, seed)` cell. Failed cells carry `NaN` metrics and a
/// `failed: ...` status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPoint {
    pub method: Method,
    pub budget: f64,
    pub seed: u64,
    pub top1: f64,
    pub flops_fraction: f64,
    pub params_fraction: f64,
    pub finetune_epochs: usize,
    pub status: String,
}

impl ComparisonPoint {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn default_budgets() -> Vec<f64> {
    vec![0.05, 0.10, 0.25, 0.50, 1.0]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_finetune_epochs() -> usize {
    5
}
fn default_finetune_lr_factor() -> f64 {
    0.1
}
fn default_dropout_rate() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training epochs per model; defaults to `train.epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Fine-tuning learning rate as a fraction of `train.lr`.
    #[serde(default = "default_finetune_lr_factor")]
    pub finetune_lr_factor: f64,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            budgets: default_budgets(),
            seeds: default_seeds(),
            epochs: None,
            finetune_epochs: default_finetune_epochs(),
            finetune_lr_factor: default_finetune_lr_factor(),
            dropout_rate: default_dropout_rate(),
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::config("compare.budgets must be non-empty and lie in (0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("compare.seeds needs at least one seed"));
        }
        if !(self.finetune_lr_factor > 0.0 && self.finetune_lr_factor.is_finite()) {
            return Err(Error::config("compare.finetune_lr_factor must be positive"));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::config("compare.dropout_rate must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// FLOPs of `model` with producing layer `l` cut down to `counts[l]` units.
fn structural_flops<T: Scalar>(model: &GatedModel<T>, shapes: &[Vec<usize>], counts: &BTreeMap<usize, usize>) -> f64 {
    let mut live: Option<usize> = None;
    let mut total = 0.0;
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Dense { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                let out = counts.get(&i).copied().unwrap_or(out);
                total += 2.0 * (live.unwrap_or(inp) * out) as f64;
                live = counts.get(&i).copied();
            }
            Layer::Conv { geom, .. } => {
                let cout = counts.get(&i).copied().unwrap_or(geom.out_channels);
                let cin = live.unwrap_or(geom.in_channels);
                total += 2.0 * (geom.kernel * geom.kernel * cin * cout * geom.out_area()) as f64;
                live = counts.get(&i).copied();
            }
            Layer::Flatten => {
                let area: usize = shapes[i][1..].iter().product();
                live = live.map(|c| c * area);
            }
            _ => {}
        }
    }
    total
}

/// Removes units in ascending `scores` order until the structural FLOPs fall
/// to `budget` of the dense FLOPs. Units flagged in `forced` go regardless of
/// the budget. No layer loses its last unit; a layer that would have is
/// reported as degenerate.
pub fn prune_to_budget<T: Scalar>(
    model: &GatedModel<T>,
    scores: &BTreeMap<usize, Vec<f64>>,
    forced: &BTreeMap<usize, Vec<bool>>,
    budget: f64,
) -> Result<CompactModel<T>> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::config(format!("budget {budget} must lie in (0, 1]")));
    }
    let shapes = model.shapes()?;
    let target = budget * model.dense_flops();
    let mut counts: BTreeMap<usize, usize> = scores.iter().map(|(&l, s)| (l, s.len())).collect();
    let is_forced = |l: usize, u: usize| forced.get(&l).is_some_and(|f| f[u]);
    let mut order: Vec<(usize, usize)> = scores.iter().flat_map(|(&l, s)| (0..s.len()).map(move |u| (l, u))).collect();
    // Forced units first, then by score; ties break on position for determinism.
    order.sort_by(|a, b| {
        is_forced(b.0, b.1)
            .cmp(&is_forced(a.0, a.1))
            .then(scores[&a.0][a.1].total_cmp(&scores[&b.0][b.1]))
            .then(a.cmp(b))
    });
    let mut removed: BTreeMap<usize, Vec<bool>> = scores.iter().map(|(&l, s)| (l, vec![false; s.len()])).collect();
    let mut degenerate = Vec::new();
    for (l, u) in order {
        if !is_forced(l, u) && structural_flops(model, &shapes, &counts) <= target {
            break;
        }
        if counts[&l] == 1 {
            if !degenerate.contains(&l) {
                log::warn!("budget {budget} would empty layer {l}; keeping its last unit");
                degenerate.push(l);
            }
            continue;
        }
        *counts.get_mut(&l).expect("scored layer") -= 1;
        removed.get_mut(&l).expect("scored layer")[u] = true;
    }
    let keep: BTreeMap<usize, Vec<usize>> = removed
        .into_iter()
        .map(|(l, r)| (l, (0..r.len()).filter(|&u| !r[u]).collect()))
        .collect();
    let mut compact = slice_units(model, &keep)?;
    compact.degenerate_layers = degenerate;
    Ok(compact)
}

/// L1 importance of every prunable unit, divided by its layer's mean so
/// scores compare across layers. Dense units use the L1 norm of their
/// outgoing weights in the next dense layer; conv channels their own kernel.
pub fn magnitude_scores<T: Scalar>(model: &GatedModel<T>) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    for l in prunable_layers(model) {
        let raw: Vec<f64> = match &model.layers[l] {
            Layer::Conv { kernels, geom, .. } => kernels
                .data()
                .chunks(geom.patch_len())
                .map(|k| k.iter().map(|v| v.as_f64().abs()).sum())
                .collect(),
            Layer::Dense { weight, .. } => {
                let units = weight.shape()[0];
                let consumer = model.layers[l + 1..].iter().find_map(|x| match x {
                    Layer::Dense { weight, .. } => Some(weight),
                    _ => None,
                });
                match consumer {
                    Some(w) if w.shape()[1] == units => {
                        let (rows, cols) = (w.shape()[0], w.shape()[1]);
                        (0..cols)
                            .map(|c| (0..rows).map(|r| w.data()[r * cols + c].as_f64().abs()).sum())
                            .collect()
                    }
                    _ => weight
                        .data()
                        .chunks(weight.shape()[1])
                        .map(|row| row.iter().map(|v| v.as_f64().abs()).sum())
                        .collect(),
                }
            }
            _ => continue,
        };
        let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        let scale = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        out.insert(l, raw.into_iter().map(|v| v * scale).collect());
    }
    out
}

/// Channel pruning baseline: drops the globally weakest units of a dense
/// model until its FLOPs fit `budget`.
pub fn magnitude_channel_prune<T: Scalar>(model: &GatedModel<T>, budget: f64) -> Result<CompactModel<T>> {
    prune_to_budget(model, &magnitude_scores(model), &BTreeMap::new(), budget)
}

/// Compacts a context-free SWAN model at `tau` and, if its structural FLOPs
/// still exceed `budget`, additionally drops the open units with the lowest
/// gate probability.
pub fn swan_to_budget<T: Scalar>(model: &GatedModel<T>, tau: f64, budget: f64) -> Result<CompactModel<T>> {
    let margins = gate_keep_sets(model, tau, None, 1.0)?;
    if margins.is_empty() {
        return Err(Error::config("swan_to_budget needs a gated model"));
    }
    let forced = margins.iter().map(|(&l, m)| (l, m.iter().map(|&v| v < 0.0).collect())).collect();
    prune_to_budget(model, &margins, &forced, budget)
}

/// Top-1 accuracy of a dropout-trained model when every dropout unit is
/// kept with probability `budget` at inference. FLOPs stay dense.
pub fn dropout_baseline_eval<T: Scalar>(
    model: &GatedModel<T>,
    data: &crate::data::Dataset,
    budget: f64,
    seed: u64,
) -> Result<ComparisonPoint> {
    if !model.layers.iter().any(|l| matches!(l, Layer::Dropout { .. })) {
        return Err(Error::config("dropout baseline needs a model with dropout layers"));
    }
    let pass = Pass {
        dropout_keep: Some(budget),
        seed,
        ..Pass::eval(ForwardMode::Dense)
    };
    let r = evaluate_pass(model, data, pass)?;
    Ok(ComparisonPoint {
        method: Method::Dropout,
        budget,
        seed,
        top1: r.accuracy,
        flops_fraction: 1.0,
        params_fraction: 1.0,
        finetune_epochs: 0,
        status: "ok".into(),
    })
}

/// Everything [`run_comparison`] needs besides the data.
#[derive(Clone, Debug)]
pub struct ComparisonSetup {
    /// A gate-free MLP or CNN; gates and dropout are added per method.
    pub arch: Architecture,
    pub gates: GateConfig,
    pub train: TrainConfig,
    /// SWAN objective; `target_active` is replaced by each budget.
    pub sparsity: SparsityConfig,
    pub compare: CompareConfig,
}

fn failed(method: Method, budget: f64, seed: u64, finetune_epochs: usize, err: &Error) -> ComparisonPoint {
    ComparisonPoint {
        method,
        budget,
        seed,
        top1: f64::NAN,
        flops_fraction: f64::NAN,
        params_fraction: f64::NAN,
        finetune_epochs,
        status: format!("failed: {err}"),
    }
}

fn compact_point<T: Scalar>(
    method: Method,
    compact: &CompactModel<T>,
    data: &crate::data::Dataset,
    budget: f64,
    seed: u64,
    finetune_epochs: usize,
) -> Result<ComparisonPoint> {
    let r = evaluate(&compact.model, data, ForwardMode::Dense)?;
    let f = compact_flops_report(compact);
    Ok(ComparisonPoint {
        method,
        budget,
        seed,
        top1: r.accuracy,
        flops_fraction: f.flops_fraction,
        params_fraction: f.params_fraction,
        finetune_epochs,
        status: "ok".into(),
    })
}

fn finetune<T: Scalar>(compact: &mut CompactModel<T>, data: &DataSplits, setup: &ComparisonSetup, seed: u64) -> Result<()> {
    let cfg = TrainConfig {
        epochs: setup.compare.finetune_epochs,
        lr: setup.train.lr * setup.compare.finetune_lr_factor,
        seed: seed.wrapping_add(1),
        schedule: GateSchedule::Dense,
        ..setup.train.clone()
    };
    if cfg.epochs == 0 {
        return Ok(());
    }
    // Early stopping on validation, counting the starting weights as epoch 0.
    let start = compact.model.clone();
    let mut best = (evaluate(&start, &data.val, ForwardMode::Hard)?.accuracy, None);
    train(&mut compact.model, &data.train, &data.val, &cfg, &SparsityConfig::disabled(setup.sparsity.tau), &mut |m, e| {
        if e.val_acc_hard > best.0 {
            best = (e.val_acc_hard, Some(m.clone()));
        }
        Ok(())
    })?;
    compact.model = best.1.unwrap_or(start);
    Ok(())
}

/// Raw and fine-tuned points for one pruned model.
fn raw_and_tuned<T: Scalar>(
    methods: (Method, Method),
    compact: Result<CompactModel<T>>,
    data: &DataSplits,
    setup: &ComparisonSetup,
    budget: f64,
    seed: u64,
) -> Vec<ComparisonPoint> {
    let ft = setup.compare.finetune_epochs;
    let mut compact = match compact {
        Ok(c) => c,
        Err(e) => return vec![failed(methods.0, budget, seed, 0, &e), failed(methods.1, budget, seed, ft, &e)],
    };
    let raw = compact_point(methods.0, &compact, &data.test, budget, seed, 0).unwrap_or_else(|e| failed(methods.0, budget, seed, 0, &e));
    let tuned = finetune(&mut compact, data, setup, seed)
        .and_then(|_| compact_point(methods.1, &compact, &data.test, budget, seed, ft))
        .unwrap_or_else(|e| failed(methods.1, budget, seed, ft, &e));
    vec![raw, tuned]
}

fn with_dropout(arch: &Architecture, rate: f64) -> Result<Architecture> {
    match arch {
        Architecture::Mlp { widths, .. } => Ok(Architecture::Mlp {
            widths: widths.clone(),
            dropout: Some(rate),
        }),
        Architecture::SmallCnn(_) => Err(Error::config("the dropout baseline is defined for MLPs only")),
    }
}

fn without_dropout(arch: &Architecture) -> Architecture {
    match arch {
        Architecture::Mlp { widths, .. } => Architecture::Mlp {
            widths: widths.clone(),
            dropout: None,
        },
        other => other.clone(),
    }
}

fn trained<T: Scalar>(
    arch: &Architecture,
    gates: &GateConfig,
    cfg: &TrainConfig,
    sparsity: &SparsityConfig,
    data: &DataSplits,
) -> Result<GatedModel<T>> {
    let mut model = build(arch, gates, cfg.seed)?;
    train(&mut model, &data.train, &data.val, cfg, sparsity, &mut |_, _| Ok(()))?;
    Ok(model)
}

/// Runs every method at every budget for every seed. Each finished cell is
/// passed to `on_point` as soon as it exists. Failures are recorded in the
/// affected cells and do not stop the grid.
pub fn run_comparison(
    data: &DataSplits,
    setup: &ComparisonSetup,
    on_point: &mut dyn FnMut(&ComparisonPoint),
) -> Result<Vec<ComparisonPoint>> {
    setup.compare.validate()?;
    let epochs = setup.compare.epochs.unwrap_or(setup.train.epochs);
    let base_arch = without_dropout(&setup.arch);
    let mut points = Vec::new();
    let mut emit = |p: ComparisonPoint, points: &mut Vec<ComparisonPoint>| {
        if !p.ok() {
            log::warn!("{} at budget {} seed {}: {}", p.method, p.budget, p.seed, p.status);
        }
        on_point(&p);
        points.push(p);
    };
    for &seed in &setup.compare.seeds {
        let cfg = TrainConfig {
            epochs,
            seed,
            schedule: GateSchedule::Dense,
            ..setup.train.clone()
        };
        let off = SparsityConfig::disabled(setup.sparsity.tau);
        log::info!("seed {seed}: training dropout and dense baselines");
        let dropout = with_dropout(&setup.arch, setup.compare.dropout_rate)
            .and_then(|a| trained::<f32>(&a, &GateConfig::none(), &cfg, &off, data));
        let dense = trained::<f32>(&base_arch, &GateConfig::none(), &cfg, &off, data);
        for &budget in &setup.compare.budgets {
            let p = match &dropout {
                Ok(m) => dropout_baseline_eval(m, &data.test, budget, seed),
                Err(e) => Err(Error::config(e.to_string())),
            };
            emit(p.unwrap_or_else(|e| failed(Method::Dropout, budget, seed, 0, &e)), &mut points);

            let cp = match &dense {
                Ok(m) => magnitude_channel_prune(m, budget),
                Err(e) => Err(Error::config(e.to_string())),
            };
            for p in raw_and_tuned((Method::CpRaw, Method::Cp), cp, data, setup, budget, seed) {
                emit(p, &mut points);
            }

            log::info!("seed {seed}: training SWAN at budget {budget}");
            let swan_cfg = TrainConfig {
                schedule: setup.train.schedule,
                ..cfg.clone()
            };
            let sparsity = SparsityConfig {
                target_active: budget,
                ..setup.sparsity.clone()
            };
            let gates = GateConfig {
                enabled: true,
                ..setup.gates.clone()
            };
            let swan = trained::<f32>(&base_arch, &gates, &swan_cfg, &sparsity, data)
                .and_then(|m| swan_to_budget(&m, setup.sparsity.tau, budget));
            for p in raw_and_tuned((Method::SwanRaw, Method::Swan), swan, data, setup, budget, seed) {
                emit(p, &mut points);
            }
        }
    }
    Ok(points)
}

/// Mean top-1 and FLOPs fraction per `(method, budget)` over successful seeds.
pub fn summarize(points: &[ComparisonPoint]) -> Vec<(Method, f64, f64, f64, usize)> {
    let mut groups: BTreeMap<(Method, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    for p in points.iter().filter(|p| p.ok()) {
        let e = groups.entry((p.method, p.budget.to_bits())).or_insert((p.budget, 0.0, 0.0, 0));
        e.1 += p.top1;
        e.2 += p.flops_fraction;
        e.3 += 1;
    }
    groups
        .into_iter()
        .map(|((m, _), (b, acc, fl, n))| (m, b, acc / n as f64, fl / n as f64, n))
        .collect()
}

/// Writes the comparison CSV.
pub fn write_comparison_csv<W: std::io::Write>(points: &[ComparisonPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
