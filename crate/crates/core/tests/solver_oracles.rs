mod common;

use common::oracles::{grid_minimum, penalized_at, vertex_minimum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use votereg::pensolve::{fit_restricted, fit_weighted_lasso, penalized_objective, PenaltyConfig, SolverConfig};
use votereg::{Dataset, LossSpec};

fn random_data(seed: u64, n: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = DVector::from_fn(n, |i, _| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        0.7 + (0..p).map(|j| x[(i, j)] * theta[j]).sum::<f64>() + noise
    });
    Dataset::new(y, x, None).unwrap()
}

#[test]
fn median_lasso_matches_grid_oracle() {
    let data = random_data(20240917, 20, 2);
    let loss = LossSpec::quantile(0.5).unwrap();
    let penalty = PenaltyConfig::lasso(0.1, 2).unwrap();
    let fit = fit_weighted_lasso(&data, &loss, &penalty, None, &SolverConfig::default()).unwrap();
    let (grid, _) = grid_minimum(&data, &loss, 0.1, &[1.0, 1.0]);
    let exact = vertex_minimum(&data, &loss, 0.1, &[1.0, 1.0]);
    assert!(fit.converged);
    assert!((fit.objective_value - grid).abs() < 1e-3, "solver {} grid {grid}", fit.objective_value);
    assert!((fit.objective_value - exact).abs() < 1e-9, "solver {} exact {exact}", fit.objective_value);
    let recomputed = penalized_objective(&data, &loss, &fit, &penalty).unwrap();
    assert!((recomputed - fit.objective_value).abs() < 1e-9);
}

#[test]
fn restricted_median_fit_matches_line_search_oracle() {
    let data = random_data(77, 15, 3);
    let loss = LossSpec::quantile(0.5).unwrap();
    let fit = fit_restricted(&data, &loss, &[0], &SolverConfig::default()).unwrap();
    let sub = data.select_columns(&[0]).unwrap();
    let (grid, _) = grid_minimum(&sub, &loss, 0.0, &[0.0]);
    let exact = vertex_minimum(&sub, &loss, 0.0, &[0.0]);
    assert_eq!(fit.coefficients[1], 0.0);
    assert_eq!(fit.coefficients[2], 0.0);
    assert!((fit.objective_value - exact).abs() < 1e-6, "solver {} exact {exact}", fit.objective_value);
    assert!((fit.objective_value - grid).abs() < 1e-6, "solver {} grid {grid}", fit.objective_value);
}

#[test]
fn restricted_squared_matches_normal_equations() {
    let data = random_data(5, 40, 4);
    let fit = fit_restricted(&data, &LossSpec::Squared, &[0, 1, 2, 3], &SolverConfig::default()).unwrap();
    let design = DMatrix::from_fn(40, 5, |i, j| if j == 0 { 1.0 } else { data.x()[(i, j - 1)] });
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * data.y();
    let sol = gram.cholesky().unwrap().solve(&rhs);
    assert!((fit.intercepts[0] - sol[0]).abs() < 1e-8);
    for j in 0..4 {
        assert!((fit.coefficients[j] - sol[j + 1]).abs() < 1e-8);
    }
}

#[test]
fn random_instances_against_oracles() {
    let losses = [
        LossSpec::quantile(0.3).unwrap(),
        LossSpec::Absolute,
        LossSpec::Squared,
        LossSpec::composite(vec![0.25, 0.5, 0.75]).unwrap(),
    ];
    let mut worst = 0.0f64;
    for seed in 0..12u64 {
        for loss in &losses {
            let p = 1 + (seed % 2) as usize;
            let n = 12 + (seed as usize % 13);
            let data = random_data(1000 + seed, n, p);
            let lambda = 0.02 * (seed % 5) as f64;
            let weights = vec![1.0; p];
            let fit = fit_weighted_lasso(
                &data,
                loss,
                &PenaltyConfig::new(lambda, weights.clone()).unwrap(),
                None,
                &SolverConfig::default(),
            )
            .unwrap();
            let (grid, _) = grid_minimum(&data, loss, lambda, &weights);
            let direct = penalized_at(&data, loss, lambda, &weights, &fit.coefficients);
            assert!(direct <= fit.objective_value + 1e-9);
            worst = worst.max(fit.objective_value - grid);
            assert!(
                (fit.objective_value - grid).abs() < 1e-3,
                "seed {seed} loss {loss}: solver {} grid {grid}",
                fit.objective_value
            );
        }
    }
    eprintln!("worst excess over grid: {worst:e}");
}
