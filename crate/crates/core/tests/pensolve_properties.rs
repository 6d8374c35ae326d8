mod common;

use common::properties::{self, loss_strategy, random_dataset};
use proptest::prelude::*;
use votereg::pensolve::{fit_restricted, fit_weighted_lasso, PenaltyConfig, SolverConfig};
use votereg::LossSpec;

#[test]
fn squared_fits_satisfy_optimality_conditions() {
    properties::squared_kkt(1000).unwrap();
}

#[test]
fn objective_never_rises_across_sweeps() {
    properties::sweep_monotone(1000).unwrap();
}

fn tight() -> SolverConfig {
    SolverConfig { tolerance: 1e-10, max_cd_sweeps: 20_000, ..SolverConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn zero_penalty_matches_unpenalized_refit(seed in any::<u64>(), n in 15usize..40, p in 1usize..5, loss in loss_strategy()) {
        let data = random_dataset(seed, n, p);
        let all: Vec<usize> = (0..p).collect();
        let penalty = PenaltyConfig::lasso(0.0, p).unwrap();
        let lasso = fit_weighted_lasso(&data, &loss, &penalty, None, &tight()).unwrap();
        let refit = fit_restricted(&data, &loss, &all, &tight()).unwrap();
        let scale = 1.0 + refit.objective_value.abs();
        prop_assert!((lasso.objective_value - refit.objective_value).abs() <= 1e-7 * scale,
            "{loss}: lasso {} refit {}", lasso.objective_value, refit.objective_value);
        if loss == LossSpec::Squared {
            for (a, b) in lasso.coefficients.iter().zip(&refit.coefficients) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn column_permutation_permutes_coefficients(
        seed in any::<u64>(),
        n in 15usize..40,
        p in 2usize..6,
        lambda in 0.005f64..0.3,
        loss in loss_strategy(),
        shuffle in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let data = random_dataset(seed, n, p);
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
        let permuted = data.select_columns(&order).unwrap();
        let penalty = PenaltyConfig::lasso(lambda, p).unwrap();
        let a = fit_weighted_lasso(&data, &loss, &penalty, None, &tight()).unwrap();
        let b = fit_weighted_lasso(&permuted, &loss, &penalty, None, &tight()).unwrap();
        let scale = 1.0 + a.objective_value.abs();
        prop_assert!((a.objective_value - b.objective_value).abs() <= 1e-8 * scale,
            "{loss}: objectives {} and {}", a.objective_value, b.objective_value);
        for (k, &j) in order.iter().enumerate() {
            prop_assert!((b.coefficients[k] - a.coefficients[j]).abs() <= 1e-5 * (1.0 + a.coefficients[j].abs()),
                "{loss}: coefficient {j} is {} but {} after permutation", a.coefficients[j], b.coefficients[k]);
        }
    }
}
