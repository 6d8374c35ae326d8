//! Variable selection by vote and the two-step select-then-refit pipeline.
//!
//! Each selection loss gets its own SCAD fit with `lambda` tuned on a
//! validation criterion. A predictor is kept when at least `alpha` of the fits
//! give it a nonzero coefficient; `alpha` is tuned by the `xi`-weighted
//! validation loss of the refits. The kept variables are then refitted
//! without penalty under the estimation losses and combined.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, input, Error, Result};
use crate::lincore::{Dataset, LossSpec, SparseFit};
use crate::optweight::{self, WeightPlan};
use crate::parallel::Workers;
use crate::pensolve::{self, SolverConfig, DEFAULT_SCAD_B};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteResult {
    /// Row `k`, column `j`: fit `k` has a nonzero coefficient `j`.
    pub support_matrix: Vec<Vec<bool>>,
    pub vote_counts: Vec<usize>,
    pub alpha: usize,
    pub selected: Vec<usize>,
}

impl VoteResult {
    pub fn from_matrix(support_matrix: Vec<Vec<bool>>, alpha: usize) -> Result<Self> {
        let vote_counts = column_counts(&support_matrix)?;
        check_alpha(alpha, support_matrix.len())?;
        let selected = threshold(&vote_counts, alpha);
        Ok(Self { support_matrix, vote_counts, alpha, selected })
    }

    pub fn from_fits(fits: &[SparseFit], alpha: usize) -> Result<Self> {
        Self::from_matrix(support_matrix(fits)?, alpha)
    }
}

/// Nonzero pattern of each fit, one row per fit.
pub fn support_matrix(fits: &[SparseFit]) -> Result<Vec<Vec<bool>>> {
    let p = fits.first().map_or(0, SparseFit::p);
    if fits.iter().any(|f| f.p() != p) {
        return dimension("fits differ in dimension");
    }
    Ok(fits.iter().map(|f| f.coefficients.iter().map(|c| *c != 0.0).collect()).collect())
}

fn column_counts(matrix: &[Vec<bool>]) -> Result<Vec<usize>> {
    let Some(first) = matrix.first() else {
        return input("vote needs at least one fit");
    };
    let p = first.len();
    let mut counts = vec![0usize; p];
    for row in matrix {
        if row.len() != p {
            return dimension("support matrix rows differ in length");
        }
        for (c, v) in counts.iter_mut().zip(row) {
            *c += usize::from(*v);
        }
    }
    Ok(counts)
}

fn check_alpha(alpha: usize, k: usize) -> Result<()> {
    if alpha == 0 || alpha > k {
        return input(format!("vote threshold {alpha} outside 1..={k}"));
    }
    Ok(())
}

fn threshold(counts: &[usize], alpha: usize) -> Vec<usize> {
    counts.iter().enumerate().filter(|(_, c)| **c >= alpha).map(|(j, _)| j).collect()
}

/// Indices with at least `alpha` votes.
pub fn vote(matrix: &[Vec<bool>], alpha: usize) -> Result<Vec<usize>> {
    let counts = column_counts(matrix)?;
    check_alpha(alpha, matrix.len())?;
    Ok(threshold(&counts, alpha))
}

/// `{ceil(K/2), ..., K-1}`, or `{1}` when that range is empty (`K <= 2`
/// gives `{1}` either way).
pub fn default_alpha_candidates(k: usize) -> Vec<usize> {
    let lo = k.div_ceil(2).max(1);
    let hi = k.saturating_sub(1).max(lo);
    (lo..=hi).collect()
}

#[derive(Debug, Clone)]
pub struct TuningCriterion {
    pub validation: Dataset,
    pub xi_weights: Vec<f64>,
    pub alpha_candidates: Vec<usize>,
}

/// `sum_k xi_k sum_i loss_k(y_i - x_i^T theta_k)` on `validation`.
pub fn weighted_validation_loss(
    fits: &[SparseFit],
    losses: &[LossSpec],
    xi: &[f64],
    validation: &Dataset,
) -> Result<f64> {
    if fits.len() != losses.len() || xi.len() != losses.len() {
        return dimension(format!("{} fits, {} losses, {} weights", fits.len(), losses.len(), xi.len()));
    }
    let mut total = 0.0;
    for ((fit, loss), w) in fits.iter().zip(losses).zip(xi) {
        total += w * loss.total_loss(validation, fit)?;
    }
    Ok(total)
}

/// Candidate with the smallest weighted validation loss; ties go to the
/// larger threshold.
pub fn select_alpha(
    fits_by_alpha: &BTreeMap<usize, Vec<SparseFit>>,
    losses: &[LossSpec],
    criterion: &TuningCriterion,
) -> Result<usize> {
    if criterion.xi_weights.iter().any(|v| !v.is_finite()) {
        return input("validation weights must be finite");
    }
    let mut scores = Vec::new();
    for &a in &criterion.alpha_candidates {
        let fits = fits_by_alpha.get(&a).ok_or_else(|| Error::Input(format!("no refits for threshold {a}")))?;
        scores.push((a, weighted_validation_loss(fits, losses, &criterion.xi_weights, &criterion.validation)?));
    }
    argmin_alpha(&scores)
}

fn argmin_alpha(scores: &[(usize, f64)]) -> Result<usize> {
    if scores.is_empty() {
        return input("empty threshold candidate set");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|s| s.0);
    let mut best: Option<(usize, f64)> = None;
    for (a, s) in sorted {
        if !s.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| s <= b) {
            best = Some((a, s));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::Numerical("no threshold candidate produced a finite validation loss".into()))
}

/// Where the tuning losses are measured.
#[derive(Debug, Clone)]
pub enum Validation {
    /// An independent validation sample.
    Holdout(Dataset),
    /// V-fold cross-validation on the training data, folds drawn from `seed`.
    CrossValidation { folds: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Number of log-spaced `lambda` values per loss.
    pub grid_size: usize,
    /// Smallest grid value as a fraction of `lambda_max`.
    pub grid_ratio: f64,
    pub scad_b: f64,
    /// Threshold candidates; `None` uses [`default_alpha_candidates`].
    pub alpha_candidates: Option<Vec<usize>>,
    /// A path stops after the first fit whose support exceeds this fraction
    /// of the sample size; the remaining grid points are not scored.
    pub max_support_fraction: f64,
    /// With a holdout set, a path stops once this many consecutive grid
    /// points fail to improve the best validation loss; 0 disables.
    pub patience: usize,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid_size: 40,
            grid_ratio: 1e-3,
            scad_b: DEFAULT_SCAD_B,
            alpha_candidates: None,
            max_support_fraction: 0.5,
            patience: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return input("lambda grid needs at least one point");
        }
        if !(self.max_support_fraction > 0.0) {
            return input(format!("support fraction must be positive, got {}", self.max_support_fraction));
        }
        if !(self.grid_ratio > 0.0 && self.grid_ratio <= 1.0) {
            return input(format!("grid ratio must lie in (0, 1], got {}", self.grid_ratio));
        }
        if !(self.scad_b > 2.0) {
            return input(format!("SCAD parameter must exceed 2, got {}", self.scad_b));
        }
        self.solver.validate()
    }
}

/// `grid_size` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, grid_size: usize, ratio: f64) -> Vec<f64> {
    if grid_size == 1 {
        return vec![lambda_max];
    }
    let step = ratio.ln() / (grid_size - 1) as f64;
    (0..grid_size).map(|i| lambda_max * (step * i as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaScore {
    pub alpha: usize,
    pub selected: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineResult {
    pub vote: VoteResult,
    pub selection_losses: Vec<String>,
    pub estimation_losses: Vec<String>,
    pub lambdas: Vec<f64>,
    pub xi_weights: Vec<f64>,
    pub alpha_scores: Vec<AlphaScore>,
    pub preliminary: Vec<SparseFit>,
    pub refits: Vec<SparseFit>,
    pub weights: Vec<f64>,
    pub weight_plan: Option<WeightPlan>,
    pub final_fit: SparseFit,
    /// The vote kept no predictor; refits are intercept-only.
    pub empty_selection: bool,
    /// Density estimation failed and uniform `xi` weights were used.
    pub xi_fallback: bool,
    /// Uniform combination weights were used instead of estimated optimal ones.
    pub uniform_weights: bool,
}

struct Split {
    train: Dataset,
    test: Dataset,
}

fn fold_splits(data: &Dataset, folds: usize, seed: u64) -> Result<Vec<Split>> {
    let n = data.n();
    if folds < 2 || folds > n / 2 {
        return input(format!("{folds} folds for {n} observations"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    (0..folds)
        .map(|v| {
            let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == v).collect();
            let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != v).collect();
            Ok(Split { train: data.select_rows(&train)?, test: data.select_rows(&test)? })
        })
        .collect()
}

/// SCAD fits warm started along the grid, from the largest `lambda` down.
/// Warm-started SCAD fits down the grid. The path ends early once the
/// support saturates or `stop` asks for it after a fit.
fn scad_path(
    data: &Dataset,
    loss: &LossSpec,
    grid: &[f64],
    config: &PipelineConfig,
    mut stop: impl FnMut(&SparseFit) -> Result<bool>,
) -> Result<Vec<SparseFit>> {
    let mut path: Vec<SparseFit> = Vec::with_capacity(grid.len());
    let cap = config.max_support_fraction * data.n() as f64;
    for &lambda in grid {
        let init = path.last().map(|f| f.coefficients.clone());
        let fit = pensolve::fit_scad_lla_from(data, loss, lambda, config.scad_b, init.as_deref(), &config.solver)?;
        let done = fit.support.len() as f64 > cap || stop(&fit)?;
        path.push(fit);
        if done {
            break;
        }
    }
    Ok(path)
}

/// Index of the smallest finite score; ties go to the earlier (larger) `lambda`.
fn argmin_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0)
}

/// One tuned SCAD fit per loss, with the chosen `lambda`.
pub fn tune_lambda(
    data: &Dataset,
    losses: &[LossSpec],
    validation: &Validation,
    config: &PipelineConfig,
    workers: &Workers,
) -> Result<Vec<(f64, SparseFit)>> {
    let grids = losses
        .iter()
        .map(|loss| {
            let top = pensolve::lambda_max(data, loss)?;
            // a zero lambda_max means the intercept alone fits; keep the grid positive
            let top = if top > 0.0 { top } else { f64::MIN_POSITIVE.sqrt() };
            Ok(lambda_grid(top, config.grid_size, config.grid_ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    match validation {
        Validation::Holdout(valid) => {
            let tasks: Vec<usize> = (0..losses.len()).collect();
            workers.try_map(tasks, |k| {
                let mut scores: Vec<f64> = Vec::new();
                let path = scad_path(data, &losses[k], &grids[k], config, |fit| {
                    scores.push(losses[k].total_loss(valid, fit)?);
                    let best = argmin_first(&scores).unwrap_or(0);
                    Ok(config.patience > 0 && scores.len() - 1 - best >= config.patience)
                })?;
                let best = argmin_first(&scores)
                    .ok_or_else(|| Error::Numerical("no finite validation loss on the grid".into()))?;
                Ok((grids[k][best], path.into_iter().nth(best).expect("index within path")))
            })
        }
        Validation::CrossValidation { folds, seed } => {
            let splits = fold_splits(data, *folds, *seed)?;
            let tasks: Vec<(usize, Option<usize>)> = (0..losses.len())
                .flat_map(|k| std::iter::once((k, None)).chain((0..splits.len()).map(move |v| (k, Some(v)))))
                .collect();
            let results = workers.try_map(tasks, |(k, fold)| -> Result<(Vec<SparseFit>, Vec<f64>)> {
                match fold {
                    None => Ok((scad_path(data, &losses[k], &grids[k], config, |_| Ok(false))?, Vec::new())),
                    Some(v) => {
                        let s = &splits[v];
                        let path = scad_path(&s.train, &losses[k], &grids[k], config, |_| Ok(false))?;
                        let mut scores =
                            path.iter().map(|f| losses[k].total_loss(&s.test, f)).collect::<Result<Vec<_>>>()?;
                        scores.resize(grids[k].len(), f64::INFINITY);
                        Ok((Vec::new(), scores))
                    }
                }
            })?;
            let per_loss = splits.len() + 1;
            results
                .chunks(per_loss)
                .enumerate()
                .map(|(k, chunk)| {
                    let mut total = vec![0.0; grids[k].len()];
                    for (_, scores) in &chunk[1..] {
                        for (t, s) in total.iter_mut().zip(scores) {
                            *t += s;
                        }
                    }
                    let full = &chunk[0].0;
                    let best = argmin_first(&total[..full.len()])
                        .ok_or_else(|| Error::Numerical("no finite validation loss on the grid".into()))?;
                    Ok((grids[k][best], full[best].clone()))
                })
                .collect()
        }
    }
}

/// Quantile levels when every loss is a single check loss.
fn quantile_levels(losses: &[LossSpec]) -> Option<Vec<f64>> {
    losses
        .iter()
        .map(LossSpec::tau)
        .collect::<Option<Vec<f64>>>()
        .filter(|_| losses.iter().all(|l| matches!(l, LossSpec::QuantileCheck { .. })))
}

/// `xi = R^-1 psi` from residuals of the averaged fits, or `None` when the
/// losses are not all check losses or the density estimate degenerates.
fn estimate_xi(data: &Dataset, fits: &[SparseFit], losses: &[LossSpec]) -> Result<Option<Vec<f64>>> {
    let Some(tau) = quantile_levels(losses) else {
        return Ok(None);
    };
    let resid = optweight::residuals(data, fits)?;
    let dens = match optweight::kde_at_quantiles(resid.as_slice(), &tau) {
        Ok(d) => d,
        Err(Error::Numerical(msg)) => {
            warn!("density estimate for validation weights failed: {msg}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    match optweight::xi_weights(&tau, &dens.f_hat) {
        Ok(xi) => Ok(Some(xi)),
        Err(Error::Numerical(msg)) => {
            warn!("validation weights unavailable: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Unpenalized refit of every loss on `support`.
fn refits_on(
    data: &Dataset,
    losses: &[LossSpec],
    support: &[usize],
    solver: &SolverConfig,
    workers: &Workers,
) -> Result<Vec<SparseFit>> {
    workers.try_map(losses.to_vec(), |loss| pensolve::fit_restricted(data, &loss, support, solver))
}

/// Full select-then-refit run: tuned SCAD fits per selection loss, vote with
/// a tuned threshold, unpenalized refits under the estimation losses on the
/// selected set, and their optimally weighted combination.
pub fn run_pipeline(
    data: &Dataset,
    selection_losses: &[LossSpec],
    estimation_losses: &[LossSpec],
    validation: &Validation,
    config: &PipelineConfig,
    workers: &Workers,
) -> Result<PipelineResult> {
    config.validate()?;
    if selection_losses.is_empty() || estimation_losses.is_empty() {
        return input("need at least one selection and one estimation loss");
    }
    for loss in selection_losses.iter().chain(estimation_losses) {
        loss.validate()?;
    }
    if let Validation::Holdout(v) = validation {
        if v.p() != data.p() {
            return dimension(format!("validation set has {} predictors, data has {}", v.p(), data.p()));
        }
    }
    let k = selection_losses.len();
    let candidates = match &config.alpha_candidates {
        Some(c) if c.is_empty() => return input("empty threshold candidate set"),
        Some(c) => {
            for &a in c {
                check_alpha(a, k)?;
            }
            let mut c = c.clone();
            c.sort_unstable();
            c.dedup();
            c
        }
        None => default_alpha_candidates(k),
    };

    let tuned = tune_lambda(data, selection_losses, validation, config, workers)?;
    let (lambdas, preliminary): (Vec<f64>, Vec<SparseFit>) = tuned.into_iter().unzip();
    let matrix = support_matrix(&preliminary)?;

    let estimated_xi = estimate_xi(data, &preliminary, selection_losses)?;
    let xi_fallback = estimated_xi.is_none() && quantile_levels(selection_losses).is_some();
    let xi = estimated_xi.unwrap_or_else(|| vec![1.0; k]);

    // distinct selected sets over the candidates
    let mut sets: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for &a in &candidates {
        sets.entry(vote(&matrix, a)?).or_default().push(a);
    }
    let set_list: Vec<Vec<usize>> = sets.keys().cloned().collect();
    let scores: Vec<f64> = match validation {
        Validation::Holdout(valid) => {
            workers.map(set_list.clone(), |set| score_set(data, valid, selection_losses, &xi, &set, &config.solver))
        }
        Validation::CrossValidation { folds, seed } => {
            let splits = fold_splits(data, *folds, *seed)?;
            let tasks: Vec<(usize, usize)> =
                (0..set_list.len()).flat_map(|s| (0..splits.len()).map(move |v| (s, v))).collect();
            let parts = workers.map(tasks, |(s, v)| {
                score_set(&splits[v].train, &splits[v].test, selection_losses, &xi, &set_list[s], &config.solver)
            });
            parts.chunks(splits.len()).map(|c| c.iter().sum()).collect()
        }
    };
    let mut alpha_scores: Vec<AlphaScore> = Vec::new();
    for (set, score) in set_list.iter().zip(&scores) {
        for &a in &sets[set] {
            alpha_scores.push(AlphaScore { alpha: a, selected: set.clone(), score: *score });
        }
    }
    alpha_scores.sort_by_key(|s| s.alpha);
    let pairs: Vec<(usize, f64)> = alpha_scores.iter().map(|s| (s.alpha, s.score)).collect();
    let alpha = argmin_alpha(&pairs)?;
    let vote_result = VoteResult::from_matrix(matrix, alpha)?;
    let selected = vote_result.selected.clone();
    let empty_selection = selected.is_empty();
    if empty_selection {
        warn!("vote with threshold {alpha} kept no predictor; refits are intercept-only");
    }

    let refits = refits_on(data, estimation_losses, &selected, &config.solver, workers)?;
    let (weights, weight_plan, uniform_weights) = combination_weights(data, &refits, estimation_losses);
    let final_fit = optweight::combine(&refits, &weights, &selected)?;

    Ok(PipelineResult {
        vote: vote_result,
        selection_losses: selection_losses.iter().map(LossSpec::label).collect(),
        estimation_losses: estimation_losses.iter().map(LossSpec::label).collect(),
        lambdas,
        xi_weights: xi,
        alpha_scores,
        preliminary,
        refits,
        weights,
        weight_plan,
        final_fit,
        empty_selection,
        xi_fallback,
        uniform_weights,
    })
}

/// Weighted validation loss of the restricted refits on `set`; infinite when
/// the refits cannot be computed (for instance a rank-deficient support).
fn score_set(
    train: &Dataset,
    test: &Dataset,
    losses: &[LossSpec],
    xi: &[f64],
    set: &[usize],
    solver: &SolverConfig,
) -> f64 {
    let fits: Result<Vec<SparseFit>> = losses.iter().map(|l| pensolve::fit_restricted(train, l, set, solver)).collect();
    match fits.and_then(|f| weighted_validation_loss(&f, losses, xi, test)) {
        Ok(s) => s,
        Err(e) => {
            warn!("refits on {} predictors failed: {e}", set.len());
            f64::INFINITY
        }
    }
}

fn combination_weights(
    data: &Dataset,
    refits: &[SparseFit],
    losses: &[LossSpec],
) -> (Vec<f64>, Option<WeightPlan>, bool) {
    let k = refits.len();
    if k == 1 {
        return (vec![1.0], None, false);
    }
    let uniform = vec![1.0 / k as f64; k];
    let Some(tau) = quantile_levels(losses) else {
        return (uniform, None, true);
    };
    match optweight::weight_plan(data, refits, &tau) {
        Ok(plan) => {
            let fallback = plan.uniform_fallback;
            if fallback {
                warn!("weight kernel condition {:e}; using uniform weights", plan.condition);
            }
            (plan.w_star.clone(), Some(plan), fallback)
        }
        Err(e) => {
            warn!("optimal weights unavailable ({e}); using uniform weights");
            (uniform, None, true)
        }
    }
}
