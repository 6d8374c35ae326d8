mod common;

use common::properties::{self, loss_strategy};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use votereg::LossSpec;

#[test]
fn subgradient_matches_finite_differences() {
    properties::subgradient_matches_differences(1000).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn losses_are_nonnegative(loss in loss_strategy(), x in -1e6f64..1e6, shifts in prop::collection::vec(-10.0f64..10.0, 3)) {
        let v = loss.loss_value(x, &shifts[..loss.n_intercepts()]).unwrap();
        prop_assert!(v >= 0.0);
    }
}

/// Mean subgradient over draws centered so the population mean is zero;
/// returns the mean in standard-error units.
fn centered_mean(loss: &LossSpec, shift: f64, draws: &[f64]) -> f64 {
    let psi: Vec<f64> = draws.iter().map(|&e| loss.subgradient(e, &[shift]).unwrap()).collect();
    let n = psi.len() as f64;
    let mean = psi.iter().sum::<f64>() / n;
    let var = psi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    mean / (var / n).sqrt()
}

#[test]
fn subgradient_has_zero_mean_under_matching_centering() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let draws: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
    // N(0, 1) quantiles at 0.25 and 0.9
    let cases = [
        (LossSpec::QuantileCheck { tau: 0.25 }, -0.6744897501960817),
        (LossSpec::QuantileCheck { tau: 0.9 }, 1.2815515655446004),
        (LossSpec::Squared, 0.0),
        (LossSpec::Absolute, 0.0),
    ];
    for (loss, shift) in cases {
        let z = centered_mean(&loss, shift, &draws);
        assert!(z.abs() < 3.0, "{loss}: mean subgradient {z} standard errors from zero");
    }
}
