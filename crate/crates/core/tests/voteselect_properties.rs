mod common;

use common::properties;
use votereg::lincore::decile_levels;
use votereg::parallel::Workers;
use votereg::simbench::{replicate_data, run_study, ErrorDist, Method, SimDesign};
use votereg::voteselect::{run_pipeline, PipelineConfig, Validation};
use votereg::LossSpec;

#[test]
fn raising_the_threshold_never_adds_predictors() {
    properties::vote_monotone_in_alpha(1000).unwrap();
}

#[test]
fn threshold_extremes_are_union_and_intersection() {
    properties::vote_extremes(1000).unwrap();
}

#[test]
fn selection_ignores_loss_order() {
    let design = SimDesign::standard(12, ErrorDist::Normal3, 404);
    let (train, valid) = replicate_data(&design, 0).unwrap();
    let losses: Vec<LossSpec> = decile_levels().into_iter().map(|tau| LossSpec::QuantileCheck { tau }).collect();
    let reversed: Vec<LossSpec> = losses.iter().rev().cloned().collect();
    let config = PipelineConfig::default();
    let validation = Validation::Holdout(valid);
    let a = run_pipeline(&train, &losses, &losses, &validation, &config, &Workers::serial()).unwrap();
    let b = run_pipeline(&train, &reversed, &reversed, &validation, &config, &Workers::serial()).unwrap();
    assert_eq!(a.vote.selected, b.vote.selected);
    assert_eq!(a.vote.alpha, b.vote.alpha);
}

#[test]
fn exact_recovery_rate_grows_with_sample_size() {
    let config = PipelineConfig::default();
    let rates: Vec<f64> = [100usize, 200, 400]
        .iter()
        .map(|&n| {
            let mut design = SimDesign::standard(12, ErrorDist::Normal3, 77);
            design.n = n;
            design.replicates = 50;
            let report = run_study(&design, &[Method::WqrVote], &config, &Workers::serial()).unwrap();
            assert!(report.failures.is_empty());
            let exact = report.records.iter().filter(|r| r.correct == 3 && r.incorrect == 0).count();
            exact as f64 / report.records.len() as f64
        })
        .collect();
    eprintln!("exact recovery rates for n = 100, 200, 400: {rates:?}");
    assert!(rates.windows(2).all(|w| w[1] >= w[0]), "rates {rates:?}");
}
