//! Gradient fidelity checks, shared by the gradient tests and the acceptance
//! run. Each returns the worst error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swan_core::gate::{apply_soft_gate, hard_gate, soft_gate_backward, ste_gate_backward, GateKind, GateParams};
use swan_core::model::{build_mlp, build_smallcnn, CnnSpec, ForwardMode, GateConfig, GatedModel, Layer, Pass};
use swan_core::objective::{
    composite_loss, credit_decomposition, expected_active_fraction, regularizer_grad, CreditWeights, Ramp,
    SparsityConfig,
};
use swan_core::ops::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, grad_check, matmul, matmul_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, softmax_cross_entropy, BnState,
};
use swan_core::Tensor;

use super::random_batch;

pub const EPS: f64 = 1e-5;

type T64 = Tensor<f64>;

/// `sum(w * y)`: a scalar loss whose upstream gradient is `w`.
fn dot(w: &T64, y: &T64) -> f64 {
    w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn check(f: impl FnMut(&T64) -> swan_core::Result<(f64, T64)>, at: &T64) -> f64 {
    grad_check(f, at, EPS).unwrap()
}

fn away_from_zero(shape: &[usize], seed: u64) -> T64 {
    random_batch(shape, seed).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

/// Distinct values, so max pooling has no ties.
fn distinct(shape: &[usize], seed: u64) -> T64 {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - n as f64 * 0.1).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    T64::from_f64(shape, &v).unwrap()
}

pub fn matmul_errors() -> Vec<(String, f64)> {
    let a = random_batch(&[4, 5], 1);
    let b = random_batch(&[5, 3], 2);
    let w = random_batch(&[4, 3], 3);
    vec![
        (
            "matmul/a".into(),
            check(|a| Ok((dot(&w, &matmul(a, &b)?), matmul_backward(a, &b, &w)?.0)), &a),
        ),
        (
            "matmul/b".into(),
            check(|b| Ok((dot(&w, &matmul(&a, b)?), matmul_backward(&a, b, &w)?.1)), &b),
        ),
    ]
}

pub fn conv_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 0), (1, 0)] {
        let x = random_batch(&[2, 2, 5, 5], 4);
        let k = random_batch(&[3, 2, 3, 3], 5);
        let bias = random_batch(&[3], 6);
        let y = conv2d(&x, &k, Some(&bias), stride, pad).unwrap();
        let w = random_batch(y.shape(), 7);
        let tag = format!("conv(s{stride},p{pad})");
        out.push((
            format!("{tag}/input"),
            check(
                |x| Ok((dot(&w, &conv2d(x, &k, Some(&bias), stride, pad)?), conv2d_backward(x, &k, &w, stride, pad)?.0)),
                &x,
            ),
        ));
        out.push((
            format!("{tag}/kernels"),
            check(
                |k| Ok((dot(&w, &conv2d(&x, k, Some(&bias), stride, pad)?), conv2d_backward(&x, k, &w, stride, pad)?.1)),
                &k,
            ),
        ));
        out.push((
            format!("{tag}/bias"),
            check(
                |b| Ok((dot(&w, &conv2d(&x, &k, Some(b), stride, pad)?), conv2d_backward(&x, &k, &w, stride, pad)?.2)),
                &bias,
            ),
        ));
    }
    out
}

pub fn batchnorm_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let x = random_batch(&[4, 3, 2, 2], 8);
    let w = random_batch(&[4, 3, 2, 2], 9);
    let mut base = BnState::<f64>::new(3);
    base.gamma = vec![1.3, -0.7, 0.4];
    base.beta = vec![0.1, 0.2, -0.3];
    base.running_mean = vec![0.2, -0.1, 0.05];
    base.running_var = vec![0.8, 1.5, 0.3];
    for training in [true, false] {
        let mode = if training { "train" } else { "infer" };
        out.push((
            format!("batchnorm({mode})/x"),
            check(
                |x| {
                    let mut st = base.clone();
                    let (y, cache) = batchnorm_forward(x, &mut st, training)?;
                    Ok((dot(&w, &y), batchnorm_backward(&w, &base, &cache)?.0))
                },
                &x,
            ),
        ));
        let affine = T64::from_vec([base.gamma.clone(), base.beta.clone()].concat());
        out.push((
            format!("batchnorm({mode})/gamma,beta"),
            check(
                |gb| {
                    let mut st = base.clone();
                    st.gamma = gb.data()[..3].to_vec();
                    st.beta = gb.data()[3..].to_vec();
                    let frozen = st.clone();
                    let (y, cache) = batchnorm_forward(&x, &mut st, training)?;
                    let (_, gg, gbeta) = batchnorm_backward(&w, &frozen, &cache)?;
                    Ok((dot(&w, &y), T64::from_vec([gg, gbeta].concat())))
                },
                &affine,
            ),
        ));
    }
    out
}

pub fn activation_errors() -> Vec<(String, f64)> {
    let x = away_from_zero(&[3, 7], 10);
    let w = random_batch(&[3, 7], 11);
    let relu_err = check(
        |x| {
            let y = relu(x);
            Ok((dot(&w, &y), relu_backward(&y, &w)?))
        },
        &x,
    );
    let xp = distinct(&[2, 2, 4, 6], 12);
    let wp = random_batch(&[2, 2, 2, 3], 13);
    let pool_err = check(
        |x| {
            let (y, cache) = maxpool2d(x, 2)?;
            Ok((dot(&wp, &y), maxpool2d_backward(&wp, &cache)?))
        },
        &xp,
    );
    let logits = random_batch(&[5, 4], 14).map(|v| 3.0 * v);
    let labels = [0, 3, 1, 1, 2];
    let ce_err = check(|z| softmax_cross_entropy(z, &labels), &logits);
    vec![("relu".into(), relu_err), ("maxpool".into(), pool_err), ("softmax-ce".into(), ce_err)]
}

pub fn soft_gate_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let cases: [(&str, Vec<usize>, Vec<usize>); 3] = [
        ("dense", vec![3, 4], vec![4]),
        ("per-sample", vec![3, 4], vec![3, 4]),
        ("channels", vec![2, 3, 2, 2], vec![3]),
    ];
    for (i, (name, hs, ps)) in cases.into_iter().enumerate() {
        let seed = 20 + 3 * i as u64;
        let h = random_batch(&hs, seed);
        let p = random_batch(&ps, seed + 1).map(|v| 0.5 + 0.4 * v);
        let w = random_batch(&hs, seed + 2);
        out.push((
            format!("soft-gate({name})/h"),
            check(|h| Ok((dot(&w, &apply_soft_gate(h, &p)?), soft_gate_backward(h, &p, &w)?.0)), &h),
        ));
        out.push((
            format!("soft-gate({name})/p"),
            check(|p| Ok((dot(&w, &apply_soft_gate(&h, p)?), soft_gate_backward(&h, p, &w)?.1)), &p),
        ));
    }
    out
}

fn flat_params(model: &mut GatedModel<f64>) -> T64 {
    T64::from_vec(model.params_mut().iter().flat_map(|s| s.data.iter().copied()).collect())
}

fn set_params(model: &mut GatedModel<f64>, theta: &T64) {
    let mut it = theta.data().iter();
    for slot in model.params_mut() {
        for v in slot.data.iter_mut() {
            *v = *it.next().expect("parameter vector too short");
        }
    }
}

/// Splits concatenated `[N]` or `[B, N]` gate gradients back into banks.
pub fn split_banks(model: &GatedModel<f64>, g: &T64) -> Vec<T64> {
    let widths: Vec<usize> = model.gate_banks().map(|(_, b)| b.units()).collect();
    let n: usize = widths.iter().sum();
    let rows = if g.ndim() == 1 { 0 } else { g.shape()[0] };
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let t = if rows == 0 {
                T64::from_vec(g.data()[start..start + w].to_vec())
            } else {
                let data = (0..rows).flat_map(|r| g.data()[r * n + start..r * n + start + w].to_vec()).collect();
                T64::new(vec![rows, w], data).unwrap()
            };
            start += w;
            t
        })
        .collect()
}

pub fn sparsity(target: f64) -> SparsityConfig {
    SparsityConfig {
        lambda_l0: 0.03,
        lambda_flops: 0.2,
        lambda_target: 4.0,
        target_active: target,
        l0_ramp: Ramp { delay: 1.0, length: 2.0 },
        flops_ramp: None,
        target_ramp: Ramp { delay: 1.0, length: 2.0 },
        tau: 0.5,
    }
}

/// Composite loss of one training pass and its full parameter gradient.
fn objective(
    model: &GatedModel<f64>,
    x: &T64,
    labels: &[usize],
    mode: ForwardMode,
    cfg: &SparsityConfig,
    t: f64,
) -> swan_core::Result<(f64, T64)> {
    let trace = model.trace(x, Pass::train(mode, 3))?;
    let (task, grad) = softmax_cross_entropy(trace.logits(), labels)?;
    let p = trace.gate_probabilities()?;
    let costs = model.cost_vector();
    let terms = composite_loss(task, &p, &costs, cfg, t)?;
    let extra = split_banks(model, &regularizer_grad(&p, &costs, cfg, t)?);
    let grads = model.backward(&trace, &grad, &extra)?;
    Ok((terms.total(), T64::from_vec(grads.flat().flatten().copied().collect())))
}

fn randomize_gates(model: &mut GatedModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        if let Layer::Gate { bank, .. } = layer {
            if let GateParams::ContextFree { logits } = &mut bank.params {
                logits.data_mut().iter_mut().for_each(|z| *z = rng.random_range(-2.0..2.0));
            }
        }
    }
}

/// Whole-network soft-mode gradient, regularizers included, for an MLP with
/// each gate kind and for a BN CNN in training mode.
pub fn model_errors() -> Vec<(String, f64)> {
    let cfg = sparsity(0.1);
    let mut out = Vec::new();
    for kind in [GateKind::ContextFree, GateKind::InputConditioned] {
        let gates = GateConfig { kind, init_logit: 0.5, ..GateConfig::default() };
        let mut m = build_mlp::<f64>(&[5, 6, 4, 3], &gates, None, 31).unwrap();
        randomize_gates(&mut m, 32);
        let x = random_batch(&[4, 5], 33);
        let labels = [0, 2, 1, 2];
        let theta = flat_params(&mut m);
        let err = check(
            |th| {
                set_params(&mut m, th);
                objective(&m, &x, &labels, ForwardMode::Soft, &cfg, 2.5)
            },
            &theta,
        );
        out.push((format!("mlp({kind:?})/soft"), err));
    }
    let spec = CnnSpec { input: [1, 6, 6], channels: vec![2, 3], classes: 3, kernel: 3 };
    let mut m = build_smallcnn::<f64>(&spec, &GateConfig { init_logit: 0.5, ..GateConfig::default() }, 34).unwrap();
    randomize_gates(&mut m, 35);
    let x = random_batch(&[3, 1, 6, 6], 36);
    let theta = flat_params(&mut m);
    let err = check(
        |th| {
            set_params(&mut m, th);
            objective(&m, &x, &[1, 0, 2], ForwardMode::Soft, &cfg, 5.0)
        },
        &theta,
    );
    out.push(("cnn(bn)/soft".into(), err));
    out
}

/// Largest deviation of the straight-through backward from
/// `dz = sum(upstream * h) * p (1 - p)`, `dh = g * upstream`.
pub fn ste_closed_form_error(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for (hs, per_sample) in [(vec![4, 6], false), (vec![4, 6], true), (vec![2, 3, 2, 2], false)] {
        let c = hs[1];
        let spatial: usize = hs[2..].iter().product();
        let h = random_batch(&hs, seed);
        let up = random_batch(&hs, seed + 1);
        let ps = if per_sample { vec![hs[0], c] } else { vec![c] };
        let p = random_batch(&ps, seed + 2).map(|v| 0.5 + 0.45 * v);
        let g = hard_gate(&p, 0.5);
        let (dh, dz) = ste_gate_backward(&h, &p, &g, &up).unwrap();
        let mut want = vec![0.0; p.len()];
        for b in 0..hs[0] {
            for i in 0..c {
                let k = if per_sample { b * c + i } else { i };
                for s in 0..spatial {
                    let j = (b * c + i) * spatial + s;
                    want[k] += up.data()[j] * h.data()[j];
                    let gk = g.data()[k];
                    worst = worst.max((dh.data()[j] - gk * up.data()[j]).abs());
                }
            }
        }
        for (k, w) in want.iter().enumerate() {
            let pk = p.data()[k];
            worst = worst.max((dz.data()[k] - w * pk * (1.0 - pk)).abs());
        }
    }
    worst
}

/// Compares the backpropagated gate-logit gradient of a random three-layer
/// gated MLP with the credit decomposition: usefulness from finite
/// differences of the task loss, pressures from the regularizer weights.
/// Returns the largest absolute difference.
pub fn credit_error(seed: u64) -> f64 {
    let cfg = sparsity(0.05);
    let t = 2.0 + (seed % 3) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [rng.random_range(3..7), rng.random_range(3..8), rng.random_range(2..6), 3];
    let mut m = build_mlp::<f64>(&widths, &GateConfig::default(), None, seed).unwrap();
    randomize_gates(&mut m, seed + 100);
    let x = random_batch(&[5, widths[0]], seed + 200);
    let labels: Vec<usize> = (0..5).map(|i| (i + seed as usize) % 3).collect();

    let trace = m.trace(&x, Pass::train(ForwardMode::Soft, 0)).unwrap();
    let (_, grad) = softmax_cross_entropy(trace.logits(), &labels).unwrap();
    let p = trace.gate_probabilities().unwrap();
    let costs = m.cost_vector();
    let extra = split_banks(&m, &regularizer_grad(&p, &costs, &cfg, t).unwrap());
    let grads = m.backward(&trace, &grad, &extra).unwrap();
    let auto: Vec<f64> = m.gate_layers().iter().flat_map(|&l| grads.gate(l).unwrap().to_vec()).collect();

    let task = |model: &GatedModel<f64>| {
        let logits = model.forward(&x, ForwardMode::Soft).unwrap().logits;
        softmax_cross_entropy(&logits, &labels).unwrap().0
    };
    let weights = CreditWeights::ramped(&cfg, t);
    let alpha = expected_active_fraction(&p).unwrap();
    let normalized = costs.normalized();
    let n = p.len();
    let mut worst = 0.0f64;
    let mut unit = 0;
    for layer in m.gate_layers() {
        let units = match &m.layers[layer] {
            Layer::Gate { bank, .. } => bank.units(),
            _ => unreachable!(),
        };
        for i in 0..units {
            let mut probe = m.clone();
            let nudge = |model: &mut GatedModel<f64>, dz: f64| {
                let Layer::Gate { bank, .. } = &mut model.layers[layer] else { unreachable!() };
                let GateParams::ContextFree { logits } = &mut bank.params else { unreachable!() };
                logits.data_mut()[i] += dz;
            };
            nudge(&mut probe, EPS);
            let plus = task(&probe);
            nudge(&mut probe, -2.0 * EPS);
            let minus = task(&probe);
            let dz_task = (plus - minus) / (2.0 * EPS);
            let pi = p.data()[unit];
            let inner = dz_task / (pi * (1.0 - pi));
            let terms = credit_decomposition(inner, pi, normalized[unit], alpha, n, &weights);
            worst = worst.max((terms.logit_gradient(pi) - auto[unit]).abs());
            unit += 1;
        }
    }
    worst
}

/// Every primitive and network-level check, by name.
pub fn all_gradient_errors() -> Vec<(String, f64)> {
    [matmul_errors(), conv_errors(), batchnorm_errors(), activation_errors(), soft_gate_errors(), model_errors()]
        .concat()
}
