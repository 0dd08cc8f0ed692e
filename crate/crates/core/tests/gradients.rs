mod common;

use common::checks;

fn assert_all_below(errors: &[(String, f64)], bound: f64) {
    let bad: Vec<_> = errors.iter().filter(|(_, e)| !(*e <= bound)).collect();
    assert!(bad.is_empty(), "relative error above {bound}: {bad:?}");
}

#[test]
fn matmul_gradients() {
    assert_all_below(&checks::matmul_errors(), 1e-4);
}

#[test]
fn conv_gradients() {
    assert_all_below(&checks::conv_errors(), 1e-4);
}

#[test]
fn batchnorm_gradients() {
    assert_all_below(&checks::batchnorm_errors(), 1e-4);
}

#[test]
fn relu_pool_and_cross_entropy_gradients() {
    assert_all_below(&checks::activation_errors(), 1e-4);
}

#[test]
fn soft_gate_gradients() {
    assert_all_below(&checks::soft_gate_errors(), 1e-4);
}

#[test]
fn whole_network_soft_gradients() {
    assert_all_below(&checks::model_errors(), 1e-4);
}

#[test]
fn straight_through_matches_closed_form() {
    for seed in 0..5 {
        let e = checks::ste_closed_form_error(seed);
        assert!(e <= 1e-6, "seed {seed}: {e}");
    }
}

#[test]
fn gate_gradient_equals_credit_sum() {
    for seed in 0..20 {
        let e = checks::credit_error(seed);
        assert!(e <= 1e-5, "seed {seed}: {e}");
    }
}
