mod common;

use common::oracles;
use proptest::prelude::*;
use swan_core::objective::{composite_loss, cosine_ramp, regularizer_grad, target_penalty, CostVector, Ramp, SparsityConfig};
use swan_core::Tensor;

#[test]
fn regularizers_match_brute_force() {
    let rep = oracles::compare(1000, 7);
    assert!(rep.worst() <= 1e-6, "r0 {} rf {} alpha {} rt {} ramp {}", rep.r0, rep.rf, rep.alpha, rep.rt, rep.ramp);
    assert!(rep.rt_zero_below_target);
}

#[test]
fn ramp_boundaries_are_exact() {
    oracles::ramp_boundaries_exact().unwrap();
}

fn cfg(target: f64) -> SparsityConfig {
    SparsityConfig {
        lambda_l0: 0.01,
        lambda_flops: 0.5,
        lambda_target: 10.0,
        target_active: target,
        l0_ramp: Ramp { delay: 5.0, length: 20.0 },
        flops_ramp: None,
        target_ramp: Ramp { delay: 5.0, length: 20.0 },
        tau: 0.5,
    }
}

proptest! {
    #[test]
    fn target_penalty_is_one_sided(alpha in 0.0f64..1.0, target in 0.0f64..1.0) {
        let v = target_penalty(alpha, target);
        if alpha <= target {
            prop_assert_eq!(v, 0.0);
        } else {
            prop_assert!(v > 0.0 || alpha - target < 1e-154);
        }
    }

    #[test]
    fn ramp_is_monotone_and_bounded(d in 0.0f64..30.0, r in 0.0f64..30.0, a in 0.0f64..80.0, b in 0.0f64..80.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (cosine_ramp(lo, d, r), cosine_ramp(hi, d, r));
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(x <= y);
    }

    #[test]
    fn regularizer_gradient_matches_differences(seed in 0u64..200, t in 0.0f64..40.0) {
        let p = common::random_batch(&[3, 6], seed).map(|v| 0.5 + 0.45 * v);
        let costs = CostVector { costs: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0], total_dense_flops: 400.0 };
        let c = cfg(0.2);
        let g = regularizer_grad(&p, &costs, &c, t).unwrap();
        let reg = |q: &Tensor<f64>| {
            let terms = composite_loss(0.0, q, &costs, &c, t).unwrap();
            terms.total()
        };
        let h = 1e-6;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (reg(&a) - reg(&b)) / (2.0 * h);
            prop_assert!((fd - g.data()[i]).abs() < 1e-6, "unit {}: fd {} analytic {}", i, fd, g.data()[i]);
        }
    }

    #[test]
    fn composite_is_task_loss_before_any_onset(t in 0.0f64..5.0, task in 0.0f64..10.0, seed in 0u64..50) {
        let p = common::random_batch(&[8], seed).map(|v| 0.5 + 0.5 * v);
        let costs = CostVector { costs: vec![1.0; 8], total_dense_flops: 10.0 };
        let terms = composite_loss(task, &p, &costs, &cfg(0.1), t).unwrap();
        prop_assert_eq!(terms.total(), task);
    }
}
