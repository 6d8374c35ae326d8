//! Randomized property checks shared by the crate tests and the acceptance
//! suite. Each runs `cases` generated inputs and reports the first
//! counterexample.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use votereg::pensolve::{fit_weighted_lasso, PenaltyConfig, SolverConfig};
use votereg::voteselect::vote;
use votereg::{Dataset, LossSpec};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// Gaussian design with a sparse signal and heavy-ish noise, drawn from `seed`.
pub fn random_dataset(seed: u64, n: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let theta: Vec<f64> =
        (0..p).map(|_| if rng.random_bool(0.5) { rng.random_range(-3.0..3.0) } else { 0.0 }).collect();
    let y = DVector::from_fn(n, |i, _| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        0.5 + (0..p).map(|j| x[(i, j)] * theta[j]).sum::<f64>() + noise
    });
    Dataset::new(y, x, None).unwrap()
}

pub fn loss_strategy() -> impl Strategy<Value = LossSpec> {
    prop_oneof![
        (0.05f64..0.95).prop_map(|tau| LossSpec::QuantileCheck { tau }),
        Just(LossSpec::Squared),
        Just(LossSpec::Absolute),
        Just(LossSpec::CompositeQuantile { taus: vec![0.25, 0.5, 0.75] }),
    ]
}

fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<bool>>> {
    (1usize..10, 1usize..15).prop_flat_map(|(k, p)| prop::collection::vec(prop::collection::vec(any::<bool>(), p), k))
}

/// Raising the threshold never adds a predictor.
pub fn vote_monotone_in_alpha(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&matrix_strategy(), |m| {
        let k = m.len();
        let mut previous: Option<Vec<usize>> = None;
        for alpha in 1..=k {
            let sel = vote(&m, alpha).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if let Some(prev) = &previous {
                prop_assert!(sel.iter().all(|j| prev.contains(j)), "alpha {alpha}: {sel:?} not within {prev:?}");
            }
            previous = Some(sel);
        }
        Ok(())
    }))
}

/// Threshold 1 is the union of the supports, threshold K their intersection.
pub fn vote_extremes(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&matrix_strategy(), |m| {
        let k = m.len();
        let p = m[0].len();
        let union: Vec<usize> = (0..p).filter(|&j| m.iter().any(|r| r[j])).collect();
        let inter: Vec<usize> = (0..p).filter(|&j| m.iter().all(|r| r[j])).collect();
        prop_assert_eq!(vote(&m, 1).unwrap(), union);
        prop_assert_eq!(vote(&m, k).unwrap(), inter);
        Ok(())
    }))
}

fn instance() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 8usize..40, 1usize..7, 0.001f64..0.6)
}

/// Squared-loss weighted Lasso fits satisfy the optimality conditions:
/// `x_j^T (r - b) = pen_j sign(theta_j)` on the support, `|x_j^T (r - b)| <= pen_j`
/// off it, and the intercept is the mean residual.
pub fn squared_kkt(cases: u32) -> Result<(), String> {
    let config = SolverConfig { tolerance: 1e-11, max_cd_sweeps: 20_000, ..SolverConfig::default() };
    report(runner(cases).run(&(instance(), prop::collection::vec(0.2f64..2.0, 7)), |((seed, n, p, lambda), w)| {
        let data = random_dataset(seed, n, p);
        let weights = w[..p].to_vec();
        let penalty = PenaltyConfig::new(lambda, weights.clone()).unwrap();
        let fit = fit_weighted_lasso(&data, &LossSpec::Squared, &penalty, None, &config).unwrap();
        let r = data.residuals(&fit.coefficients).unwrap();
        let b = fit.intercepts[0];
        let mean = r.mean();
        prop_assert!((b - mean).abs() <= 1e-8 * (1.0 + mean.abs()), "intercept {b} vs mean {mean}");
        for j in 0..p {
            let g: f64 = (0..n).map(|i| data.x()[(i, j)] * (r[i] - b)).sum();
            let pen = n as f64 * lambda * weights[j];
            let tol = 1e-6 * (1.0 + pen);
            let t = fit.coefficients[j];
            if t == 0.0 {
                prop_assert!(g.abs() <= pen + tol, "j {j}: |g| {} > pen {pen}", g.abs());
            } else {
                prop_assert!((g - pen * t.signum()).abs() <= tol, "j {j}: g {g} vs {}", pen * t.signum());
            }
        }
        Ok(())
    }))
}

/// The traced penalized objective never increases from one sweep to the next.
pub fn sweep_monotone(cases: u32) -> Result<(), String> {
    let config = SolverConfig { trace: true, ..SolverConfig::default() };
    report(runner(cases).run(&(instance(), loss_strategy()), |((seed, n, p, lambda), loss)| {
        let data = random_dataset(seed, n, p);
        let penalty = PenaltyConfig::lasso(lambda, p).unwrap();
        let fit = fit_weighted_lasso(&data, &loss, &penalty, None, &config).unwrap();
        prop_assert!(!fit.sweep_objectives.is_empty());
        for pair in fit.sweep_objectives.windows(2) {
            prop_assert!(
                pair[1] <= pair[0] + 1e-9 * (1.0 + pair[0].abs()),
                "{loss}: objective rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
        let last = *fit.sweep_objectives.last().unwrap();
        prop_assert!((last - fit.objective_value).abs() <= 1e-9 * (1.0 + last.abs()));
        Ok(())
    }))
}

/// Central differences of the loss match the subgradient away from kinks.
/// The squared loss is compared on its halved form, whose derivative is the
/// identity subgradient.
pub fn subgradient_matches_differences(cases: u32) -> Result<(), String> {
    let points = (loss_strategy(), -10.0f64..10.0, prop::collection::vec(-3.0f64..3.0, 3));
    report(runner(cases).run(&points, |(loss, x, shifts)| {
        let intercepts: Vec<f64> = shifts[..loss.n_intercepts()].to_vec();
        let h = 1e-6;
        prop_assume!(intercepts.iter().all(|b| (x - b).abs() > 10.0 * h));
        let scale = if loss.is_smooth() { 0.5 } else { 1.0 };
        let f = |v: f64| scale * loss.loss_value(v, &intercepts).unwrap();
        let numeric = (f(x + h) - f(x - h)) / (2.0 * h);
        let psi = loss.subgradient(x, &intercepts).unwrap();
        prop_assert!(
            (numeric - psi).abs() <= 1e-6 * psi.abs().max(1.0),
            "{loss} at {x}: difference {numeric} vs subgradient {psi}"
        );
        Ok(())
    }))
}
