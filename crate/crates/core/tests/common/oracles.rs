//! Brute-force regularizer formulas written from their definitions, without
//! sharing any code with the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swan_core::objective::{
    cosine_ramp, expected_active_fraction, flops_penalty, l0_proxy, target_penalty, CostVector,
};
use swan_core::Tensor;

/// Gate probabilities as rows of samples (a single row for batch-constant gates).
pub struct Case {
    pub rows: Vec<Vec<f64>>,
    pub per_sample: bool,
    pub costs: Vec<f64>,
    pub dense: f64,
    pub target: f64,
    pub t: f64,
    pub d: f64,
    pub r: f64,
}

impl Case {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..40);
        let per_sample = rng.random_bool(0.5);
        let b = if per_sample { rng.random_range(1..9) } else { 1 };
        let rows = (0..b).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let costs: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5000.0)).collect();
        let dense = costs.iter().sum::<f64>() + rng.random_range(0.0..10_000.0);
        let d = rng.random_range(0.0..20.0);
        let r = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.1..40.0) };
        Self {
            rows,
            per_sample,
            costs,
            dense,
            target: rng.random_range(0.0..1.0),
            t: rng.random_range(0.0..80.0),
            d,
            r,
        }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        let flat: Vec<f64> = self.rows.concat();
        if self.per_sample {
            Tensor::from_f64(&[self.rows.len(), self.rows[0].len()], &flat).unwrap()
        } else {
            Tensor::from_f64(&[flat.len()], &flat).unwrap()
        }
    }
}

pub fn r0(c: &Case) -> f64 {
    let mut total = 0.0;
    for row in &c.rows {
        for p in row {
            total += p;
        }
    }
    total / c.rows.len() as f64
}

pub fn rf(c: &Case) -> f64 {
    let mut total = 0.0;
    for row in &c.rows {
        for (p, cost) in row.iter().zip(&c.costs) {
            total += p * cost / c.dense;
        }
    }
    total / c.rows.len() as f64
}

pub fn alpha(c: &Case) -> f64 {
    let count = (c.rows.len() * c.rows[0].len()) as f64;
    c.rows.iter().flatten().sum::<f64>() / count
}

pub fn rt(alpha: f64, target: f64) -> f64 {
    if alpha <= target {
        0.0
    } else {
        (alpha - target) * (alpha - target)
    }
}

pub fn ramp(t: f64, d: f64, r: f64) -> f64 {
    if t <= d {
        0.0
    } else if t >= d + r {
        1.0
    } else {
        (1.0 - (std::f64::consts::PI * (t - d) / r).cos()) / 2.0
    }
}

/// Worst absolute disagreement per regularizer over `cases` random draws,
/// plus whether the target penalty was exactly zero every time `alpha <= target`.
pub struct OracleReport {
    pub r0: f64,
    pub rf: f64,
    pub alpha: f64,
    pub rt: f64,
    pub ramp: f64,
    pub rt_zero_below_target: bool,
}

impl OracleReport {
    pub fn worst(&self) -> f64 {
        [self.r0, self.rf, self.alpha, self.rt, self.ramp].into_iter().fold(0.0, f64::max)
    }
}

pub fn compare(cases: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport {
        r0: 0.0,
        rf: 0.0,
        alpha: 0.0,
        rt: 0.0,
        ramp: 0.0,
        rt_zero_below_target: true,
    };
    for _ in 0..cases {
        let c = Case::random(&mut rng);
        let p = c.tensor();
        let costs = CostVector {
            costs: c.costs.clone(),
            total_dense_flops: c.dense,
        };
        rep.r0 = rep.r0.max((l0_proxy(&p).unwrap() - r0(&c)).abs());
        rep.rf = rep.rf.max((flops_penalty(&p, &costs).unwrap() - rf(&c)).abs());
        let a = expected_active_fraction(&p).unwrap();
        rep.alpha = rep.alpha.max((a - alpha(&c)).abs());
        let got = target_penalty(a, c.target);
        rep.rt = rep.rt.max((got - rt(a, c.target)).abs());
        if a <= c.target && got != 0.0 {
            rep.rt_zero_below_target = false;
        }
        rep.ramp = rep.ramp.max((cosine_ramp(c.t, c.d, c.r) - ramp(c.t, c.d, c.r)).abs());
    }
    rep
}

/// `t = d -> 0`, `t = d + r/2 -> 0.5`, `t >= d + r -> 1`, checked for exact equality.
pub fn ramp_boundaries_exact() -> Result<(), String> {
    for (d, r) in [(5.0, 20.0), (0.0, 10.0), (3.0, 1.0), (12.5, 7.0)] {
        let checks = [(d, 0.0), (d + r / 2.0, 0.5), (d + r, 1.0), (d + r + 0.5, 1.0), (d + 10.0 * r, 1.0)];
        for (t, want) in checks {
            let got = cosine_ramp(t, d, r);
            if got != want {
                return Err(format!("ramp({t}, {d}, {r}) = {got:e}, want {want}"));
            }
        }
    }
    Ok(())
}
