mod common;

use proptest::prelude::*;
use swan_core::gate::{gate_probabilities, hard_gate, GateKind, GateParams};
use swan_core::model::{build_mlp, build_smallcnn, CnnSpec, ForwardMode, GateConfig, GatedModel, Layer, Pass};
use swan_core::ops::BN_EPS;
use swan_core::train::evaluate;
use swan_core::{Error, Tensor};

fn reference_mlp() -> GatedModel<f32> {
    build_mlp(&[784, 256, 256, 10], &GateConfig::default(), None, 1).unwrap()
}

fn set_logits(model: &mut GatedModel<f64>, layer: usize, value: f64) {
    let Layer::Gate { bank, .. } = &mut model.layers[layer] else { panic!("layer {layer} is not a gate") };
    let GateParams::ContextFree { logits } = &mut bank.params else { panic!("conditioned gate") };
    logits.data_mut().iter_mut().for_each(|z| *z = value);
}

#[test]
fn reference_mlp_has_512_gates_and_fan_in_costs() {
    let m = reference_mlp();
    assert_eq!(m.gate_banks().count(), 2);
    assert_eq!(m.gate_count(), 512);
    let costs = m.cost_vector();
    assert_eq!(costs.len(), 512);
    assert_eq!(costs.costs[0], 1568.0);
    assert_eq!(costs.costs[256], 512.0);
    assert_eq!(m.dense_flops(), 2.0 * (784.0 * 256.0 + 256.0 * 256.0 + 256.0 * 10.0));
    assert_eq!(m.dense_flops(), 537_600.0);
}

#[test]
fn shallow_mlp_has_no_gates() {
    let m = build_mlp::<f32>(&[10, 5], &GateConfig::default(), None, 1).unwrap();
    assert_eq!(m.gate_count(), 0);
    assert!(m.cost_vector().is_empty());
}

#[test]
fn too_few_widths_is_a_config_error() {
    assert!(matches!(build_mlp::<f32>(&[10], &GateConfig::default(), None, 1), Err(Error::Config(_))));
}

#[test]
fn small_cnn_gates_every_channel() {
    let spec = CnnSpec {
        input: [1, 28, 28],
        channels: vec![16, 32],
        classes: 10,
        kernel: 3,
    };
    let m = build_smallcnn::<f32>(&spec, &GateConfig::default(), 1).unwrap();
    assert_eq!(m.gate_count(), 48);
    let costs = m.cost_vector();
    // Second block: 16 -> 32 channels, 3x3, on a 14x14 map.
    assert_eq!(costs.costs[16], 2.0 * 9.0 * 16.0 * 14.0 * 14.0);
    assert_eq!(costs.costs[16], 56_448.0);
}

#[test]
fn too_many_pooling_stages_is_a_config_error() {
    let spec = CnnSpec {
        input: [1, 4, 4],
        channels: vec![2, 2, 2],
        classes: 2,
        kernel: 3,
    };
    assert!(matches!(build_smallcnn::<f32>(&spec, &GateConfig::default(), 1), Err(Error::Config(_))));
}

#[test]
fn open_gates_make_soft_match_dense() {
    let mut m = build_mlp::<f64>(&[12, 9, 7, 3], &GateConfig::default(), None, 4).unwrap();
    set_logits(&mut m, 2, 30.0);
    set_logits(&mut m, 5, 30.0);
    let x = common::random_batch(&[6, 12], 9);
    let dense = m.forward(&x, ForwardMode::Dense).unwrap().logits;
    let soft = m.forward(&x, ForwardMode::Soft).unwrap().logits;
    assert!(dense.max_abs_diff(&soft).unwrap() < 1e-4);
}

#[test]
fn closed_layer_gives_input_independent_logits() {
    let mut m = build_mlp::<f64>(&[12, 9, 7, 3], &GateConfig::default(), None, 4).unwrap();
    set_logits(&mut m, 2, -30.0);
    let b1: Vec<f64> = (0..7).map(|i| 0.1 * i as f64 - 0.2).collect();
    if let Layer::Dense { bias, .. } = &mut m.layers[3] {
        *bias = Tensor::from_f64(&[7], &b1).unwrap();
    }
    let out = m.forward(&common::random_batch(&[5, 12], 2), ForwardMode::Hard).unwrap().logits;
    let first = out.data()[..3].to_vec();
    for row in out.data().chunks(3) {
        assert_eq!(row, &first[..]);
    }
    // The closed layer feeds zeros, so only biases propagate: W relu(b1) + b2.
    let Layer::Dense { weight, bias } = &m.layers[6] else { panic!() };
    for (j, a) in first.iter().enumerate() {
        let want: f64 = bias.data()[j] + (0..7).map(|i| weight.data()[j * 7 + i] * b1[i].max(0.0)).sum::<f64>();
        assert!((a - want).abs() < 1e-12);
    }
}

#[test]
fn one_by_one_identity_cnn_reproduces_pooled_input() {
    let spec = CnnSpec {
        input: [1, 4, 4],
        channels: vec![1],
        classes: 2,
        kernel: 1,
    };
    let mut m = build_smallcnn::<f64>(&spec, &GateConfig::default(), 3).unwrap();
    if let Layer::Conv { kernels, .. } = &mut m.layers[0] {
        kernels.data_mut()[0] = 1.0;
    }
    if let Layer::BatchNorm(bn) = &mut m.layers[1] {
        bn.running_var[0] = 1.0 - BN_EPS;
    }
    let x = Tensor::<f64>::from_f64(&[1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
    let acts = m.trace(&x, Pass::eval(ForwardMode::Dense)).unwrap().acts;
    let flat_in = m.layers.iter().position(|l| matches!(l, Layer::Flatten)).unwrap();
    let pooled = acts[flat_in].data().to_vec();
    let want = [6.0, 8.0, 14.0, 16.0];
    for (a, b) in pooled.iter().zip(want) {
        assert!((a - b).abs() < 1e-9, "{pooled:?}");
    }
}

#[test]
fn hard_active_fraction_matches_independent_gates() {
    let gates = GateConfig {
        kind: GateKind::InputConditioned,
        init_logit: 0.0,
        ..GateConfig::default()
    };
    let m = build_mlp::<f32>(&[784, 64, 32, 10], &gates, None, 11).unwrap();
    let x = common::mnist_or_random_batch(8);
    let out = m.forward(&x, ForwardMode::Hard).unwrap();
    let trace = m.trace(&x, Pass::eval(ForwardMode::Hard)).unwrap();
    let (mut open, mut total) = (0.0, 0.0);
    for (k, (_, bank)) in m.gate_banks().enumerate() {
        let source = m.gated_sources()[k];
        let p = gate_probabilities(bank, Some(&trace.acts[source])).unwrap();
        let g = hard_gate(&p, bank.tau);
        assert_eq!(g, out.decisions[k].g);
        open += g.data().iter().map(|&v| f64::from(v)).sum::<f64>();
        total += g.len() as f64;
    }
    let reported: f64 = out.decisions.iter().map(|d| d.active_fraction * d.g.len() as f64).sum::<f64>() / total;
    assert!((reported - open / total).abs() < 1e-12);
    assert!(open > 0.0 && open < total, "degenerate gate pattern");
}

#[test]
fn flops_accounting_by_mode() {
    let mut m = build_mlp::<f64>(&[6, 4, 4, 2], &GateConfig::default(), None, 2).unwrap();
    // Close half of the first hidden layer.
    let Layer::Gate { bank, .. } = &mut m.layers[2] else { panic!() };
    let GateParams::ContextFree { logits } = &mut bank.params else { panic!() };
    logits.data_mut()[..2].iter_mut().for_each(|z| *z = -5.0);
    let data = common::blobs(40, 2, 6);
    let costs = m.cost_vector();
    let dense = m.dense_flops();
    assert_eq!(dense, costs.costs.iter().sum::<f64>() + m.ungated_flops());
    let hard = evaluate(&m, &data, ForwardMode::Hard).unwrap();
    let open: f64 = costs.costs[2..].iter().sum();
    assert!((hard.flops_fraction - (open + m.ungated_flops()) / dense).abs() < 1e-12);
    assert_eq!(evaluate(&m, &data, ForwardMode::Soft).unwrap().flops_fraction, 1.0);
    assert_eq!(evaluate(&m, &data, ForwardMode::Dense).unwrap().flops_fraction, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_count_matches_cost_vector(widths in prop::collection::vec(1usize..20, 2..6), seed in 0u64..100) {
        let m = build_mlp::<f32>(&widths, &GateConfig::default(), None, seed).unwrap();
        prop_assert_eq!(m.gate_count(), m.cost_vector().len());
        prop_assert_eq!(m.gate_count(), widths[1..widths.len() - 1].iter().sum::<usize>());
        let total = m.cost_vector().costs.iter().sum::<f64>() + m.ungated_flops();
        prop_assert!((total - m.dense_flops()).abs() < 1e-9);
    }

    #[test]
    fn cnn_gate_count_is_channel_sum(c1 in 1usize..6, c2 in 1usize..6, seed in 0u64..50) {
        let spec = CnnSpec { input: [1, 8, 8], channels: vec![c1, c2], classes: 3, kernel: 3 };
        let m = build_smallcnn::<f32>(&spec, &GateConfig::default(), seed).unwrap();
        prop_assert_eq!(m.gate_count(), c1 + c2);
        prop_assert_eq!(m.cost_vector().len(), c1 + c2);
    }
}
