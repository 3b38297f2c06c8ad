//! Generative invariance checks, each run for `CASES` random cases.

use std::collections::BTreeMap;

use dynrd::aggregate::{aggregate_tau, CohortEstimate};
use dynrd::data::{PretrendVectors, RdVectors};
use dynrd::estimator::{estimate, NnConfig, RobustEstimate};
use dynrd::localpoly::{Kernel, Side};
use dynrd::pretrend::{chi2_2df_sf, pretrend_side, pretrend_test};
use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 128;

fn run<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>)
where
    S::Value: std::fmt::Debug,
{
    let config = ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(CASES)
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    let mut runner = TestRunner::new_with_rng(config, rng);
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{name}: {e}");
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

pub fn rd_sample(seed: u64, n: usize) -> RdVectors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = r
        .iter()
        .map(|&x| x * x + if x >= 0.0 { 1.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
        .collect();
    let never: Vec<f64> = r
        .iter()
        .map(|_| (rng.random::<f64>() < 0.7) as u8 as f64)
        .collect();
    let growth = never
        .iter()
        .zip(&r)
        .map(|(&d, &x)| d * (0.5 * x + rng.random_range(-0.3..0.3)))
        .collect();
    RdVectors::new(r, y, growth, never, 2).unwrap()
}

pub fn pre_sample(seed: u64, n: usize) -> PretrendVectors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let change: Vec<f64> = r.iter().map(|&x| 0.3 * x + rng.random_range(-1.0..1.0)).collect();
    let never = r
        .iter()
        .map(|_| (rng.random::<f64>() < 0.5) as u8 as f64)
        .collect();
    PretrendVectors::from_changes(r, &change, never).unwrap()
}

fn fit(v: &RdVectors, h: f64, b: f64) -> RobustEstimate {
    estimate(v, h, b, &Kernel::triangular(), &NnConfig::default(), 0.05).unwrap()
}

fn cohort(id: &str, est: &RobustEstimate) -> CohortEstimate {
    CohortEstimate {
        cohort_id: id.into(),
        g_periods: vec![],
        tau: 1,
        est: est.clone(),
        n_units: 100,
        bandwidths: None,
    }
}

fn weight_map(ids: &[String], raw: &[f64]) -> BTreeMap<String, f64> {
    let total: f64 = raw.iter().sum();
    let mut map: BTreeMap<String, f64> = ids.iter().cloned().zip(raw.iter().map(|w| w / total)).collect();
    // Absorb rounding so the weights sum to one within the aggregation check.
    let drift: f64 = 1.0 - map.values().sum::<f64>();
    *map.values_mut().next().unwrap() += drift;
    map
}

pub fn permutation_invariance() {
    run(
        "permutation invariance",
        (any::<u64>(), 150usize..300, 0.3f64..0.9, 0.3f64..0.9),
        |(seed, n, h, b)| {
            let v = rd_sample(seed, n);
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let a = fit(&v, h, b);
            let p = fit(&v.permuted(&perm), h, b);
            prop_assert!(rel_close(a.theta_bc, p.theta_bc, 1e-12));
            prop_assert!(rel_close(a.v_bc, p.v_bc, 1e-12));
            Ok(())
        },
    );
}

pub fn weight_locality() {
    run(
        "weight locality",
        (
            any::<u64>(),
            150usize..300,
            0.2f64..0.6,
            0.2f64..0.6,
            -50.0f64..50.0,
        ),
        |(seed, n, h, b, shift)| {
            let v = rd_sample(seed, n);
            let reach = h.max(b);
            let mut moved = v.clone();
            for (i, &x) in v.running.iter().enumerate() {
                if x.abs() >= reach {
                    moved.outcome[i] += shift;
                    if moved.never[i] == 1.0 {
                        moved.growth[i] -= shift;
                    }
                }
            }
            let a = fit(&v, h, b);
            let m = fit(&moved, h, b);
            prop_assert_eq!(a.theta_bc, m.theta_bc);
            prop_assert_eq!(a.v_bc, m.v_bc);
            Ok(())
        },
    );
}

pub fn scale_equivariance() {
    run(
        "scale equivariance",
        (
            any::<u64>(),
            150usize..300,
            0.3f64..0.9,
            0.3f64..0.9,
            prop_oneof![-20.0f64..-0.05, 0.05f64..20.0],
        ),
        |(seed, n, h, b, s)| {
            let v = rd_sample(seed, n);
            let mut scaled = v.clone();
            scaled.outcome.iter_mut().for_each(|y| *y *= s);
            scaled.growth.iter_mut().for_each(|w| *w *= s);
            let a = fit(&v, h, b);
            let c = fit(&scaled, h, b);
            prop_assert!(rel_close(c.theta_bc, s * a.theta_bc, 1e-9));
            prop_assert!(rel_close(c.v_bc, s * s * a.v_bc, 1e-9));

            let pre = pre_sample(seed, n);
            let mut pre_scaled = pre.clone();
            pre_scaled.never_trend.iter_mut().for_each(|x| *x *= s);
            pre_scaled.ever_trend.iter_mut().for_each(|x| *x *= s);
            let k = Kernel::triangular();
            let nn = NnConfig::default();
            for side in Side::BOTH {
                let base = pretrend_side(&pre, side, h, b, &k, &nn).unwrap();
                let out = pretrend_side(&pre_scaled, side, h, b, &k, &nn).unwrap();
                prop_assert!(rel_close(out.pi_bc, s * base.pi_bc, 1e-9));
                prop_assert!((out.z() - s.signum() * base.z()).abs() <= 1e-8 * base.z().abs().max(1.0));
            }
            Ok(())
        },
    );
}

pub fn aggregation_linearity() {
    run(
        "aggregation linearity",
        (any::<u64>(), prop::collection::vec(0.001f64..1.0, 1..8)),
        |(seed, raw)| {
            let est = fit(&rd_sample(seed, 200), 0.6, 0.7);
            let ids: Vec<String> = (0..raw.len()).map(|i| format!("g{i}")).collect();
            let cohorts: Vec<CohortEstimate> = ids.iter().map(|id| cohort(id, &est)).collect();
            let weights = weight_map(&ids, &raw);
            let agg = aggregate_tau(&cohorts, &weights).unwrap();
            prop_assert!(rel_close(agg.theta_agg, est.theta_bc, 1e-12));
            prop_assert!(agg.se_agg <= est.se * (1.0 + 1e-12));

            let mut padded = cohorts.clone();
            padded.push(cohort("zero", &fit(&rd_sample(seed ^ 1, 200), 0.6, 0.7)));
            let mut padded_weights = weights.clone();
            padded_weights.insert("zero".into(), 0.0);
            let with_zero = aggregate_tau(&padded, &padded_weights).unwrap();
            prop_assert_eq!(with_zero.theta_agg, agg.theta_agg);
            prop_assert_eq!(with_zero.se_agg, agg.se_agg);
            Ok(())
        },
    );
}

pub fn group_label_swap() {
    run(
        "group label swap",
        (any::<u64>(), 150usize..300, 0.3f64..0.9, 0.3f64..0.9),
        |(seed, n, h, b)| {
            let v = pre_sample(seed, n);
            let k = Kernel::triangular();
            let nn = NnConfig::default();
            let a = pretrend_test(&v, 3, 1, h, b, &k, &nn).unwrap();
            let s = pretrend_test(&v.swapped(), 3, 1, h, b, &k, &nn).unwrap();
            prop_assert!(rel_close(s.pi_plus, -a.pi_plus, 1e-9));
            prop_assert!(rel_close(s.pi_minus, -a.pi_minus, 1e-9));
            prop_assert!(rel_close(s.stat, a.stat, 1e-9));
            prop_assert!((s.p_value - a.p_value).abs() <= 1e-9);
            Ok(())
        },
    );
}

pub fn p_value_monotone() {
    run(
        "p-value monotonicity",
        (0.0f64..200.0, 1e-6f64..50.0),
        |(x, dx)| {
            let (lo, hi) = (chi2_2df_sf(x), chi2_2df_sf(x + dx));
            prop_assert!(hi < lo || (hi == 0.0 && lo == 0.0));
            prop_assert!((0.0..=1.0).contains(&lo));
            Ok(())
        },
    );
}

pub const ALL: [(&str, fn()); 6] = [
    ("permutation invariance", permutation_invariance),
    ("weight locality", weight_locality),
    ("scale equivariance", scale_equivariance),
    ("aggregation linearity", aggregation_linearity),
    ("group label swap", group_label_swap),
    ("p-value monotonicity", p_value_monotone),
];
