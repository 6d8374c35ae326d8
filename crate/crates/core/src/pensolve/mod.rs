//! Penalized and unpenalized M-estimation.
//!
//! * [`fit_weighted_lasso`] minimizes `sum_i loss(y_i - b - x_i^T theta) + n lambda sum_j d_j |theta_j|`.
//! * [`fit_scad_lla`] iterates weighted-Lasso fits with weights from the SCAD
//!   derivative at the previous iterate (local linear approximation).
//! * [`fit_restricted`] minimizes the unpenalized loss with coefficients
//!   outside a support pinned at zero.
//!
//! For the squared loss the solver objective is `0.5 * sum r^2`, so the
//! penalty is calibrated against the subgradient `psi(x) = x`: a coefficient
//! is zero iff `|sum_i x_ij r_i| <= n lambda d_j`. Check-type losses use their
//! plain form. All fits carry unpenalized intercepts (one per quantile level
//! for the composite loss).

mod breakpoint;
mod engine;
mod vertex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, input, Error, Result};
use crate::lincore::{Dataset, LossSpec, SparseFit};
use engine::{Engine, ExactBudget};

pub(crate) use engine::lower_rank;

pub const DEFAULT_SCAD_B: f64 = 3.7;

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub scad_b: f64,
}

impl PenaltyConfig {
    pub fn new(lambda: f64, weights: Vec<f64>) -> Result<Self> {
        let cfg = Self { lambda, weights, scad_b: DEFAULT_SCAD_B };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Uniform unit weights: the plain Lasso.
    pub fn lasso(lambda: f64, p: usize) -> Result<Self> {
        Self::new(lambda, vec![1.0; p])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return input(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return input("penalty weights must be finite and nonnegative");
        }
        if !(self.scad_b > 2.0) {
            return input(format!("SCAD constant must exceed 2, got {}", self.scad_b));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    pub max_cd_sweeps: usize,
    /// Largest absolute coefficient change per sweep at convergence.
    pub tolerance: f64,
    pub support_stability_rounds: usize,
    /// Scale predictors to unit standard deviation internally, reporting
    /// coefficients on the original scale.
    pub standardize: bool,
    /// Record the penalized objective after every sweep.
    pub trace: bool,
    /// Budget of exact vertex steps per fit for check-type losses.
    pub max_vertex_steps: usize,
    /// Above this many predictors the exact phase works on a growing
    /// working set instead of all coefficients.
    pub working_set_above: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 50,
            max_cd_sweeps: 500,
            tolerance: 1e-6,
            support_stability_rounds: 2,
            standardize: false,
            trace: false,
            max_vertex_steps: 20_000,
            working_set_above: 40,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0
            || self.max_cd_sweeps == 0
            || self.support_stability_rounds == 0
            || !(self.tolerance > 0.0)
        {
            return input("solver budgets and tolerance must be positive");
        }
        Ok(())
    }
}

/// SCAD derivative `lambda * d(x)`: `lambda` for `|x| <= lambda`, then
/// `(b lambda - |x|)_+ / (b - 1)`.
pub fn scad_weight(x: f64, lambda: f64, b: f64) -> f64 {
    let ax = x.abs();
    if ax <= lambda {
        lambda
    } else {
        (b * lambda - ax).max(0.0) / (b - 1.0)
    }
}

/// Penalized solver objective of a fit (see the module docs for the loss scaling).
pub fn penalized_objective(data: &Dataset, loss: &LossSpec, fit: &SparseFit, penalty: &PenaltyConfig) -> Result<f64> {
    let base = loss.total_loss(data, fit)?;
    let base = if loss.is_smooth() { 0.5 * base } else { base };
    let n = data.n() as f64;
    let pen: f64 = fit.coefficients.iter().zip(&penalty.weights).map(|(c, w)| n * penalty.lambda * w * c.abs()).sum();
    Ok(base + pen)
}

fn check_data(data: &Dataset, loss: &LossSpec) -> Result<()> {
    loss.validate()?;
    if data.y().iter().chain(data.x().iter()).any(|v| !v.is_finite()) {
        return input("non-finite data");
    }
    Ok(())
}

/// Column scales used when `standardize` is on.
fn column_scales(data: &Dataset) -> Vec<f64> {
    let n = data.n() as f64;
    data.x()
        .column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

fn scaled(data: &Dataset, scales: &[f64]) -> Result<Dataset> {
    let mut x = data.x().clone();
    for (j, s) in scales.iter().enumerate() {
        x.column_mut(j).iter_mut().for_each(|v| *v /= s);
    }
    Dataset::new(data.y().clone(), x, data.column_names().map(<[String]>::to_vec))
}

/// Weighted-Lasso fit under any loss, by cyclic coordinate descent warm
/// started at `init` (zero when absent).
pub fn fit_weighted_lasso(
    data: &Dataset,
    loss: &LossSpec,
    penalty: &PenaltyConfig,
    init: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<SparseFit> {
    check_data(data, loss)?;
    penalty.validate()?;
    config.validate()?;
    let p = data.p();
    if penalty.weights.len() != p {
        return dimension(format!("{} penalty weights for {p} predictors", penalty.weights.len()));
    }
    if let Some(init) = init {
        if init.len() != p {
            return dimension(format!("warm start has {} coefficients for {p} predictors", init.len()));
        }
    }
    if config.standardize {
        let scales = column_scales(data);
        let sdata = scaled(data, &scales)?;
        let sinit: Option<Vec<f64>> = init.map(|c| c.iter().zip(&scales).map(|(v, s)| v * s).collect());
        let mut inner = config.clone();
        inner.standardize = false;
        let mut fit = fit_weighted_lasso(&sdata, loss, penalty, sinit.as_deref(), &inner)?;
        for (c, s) in fit.coefficients.iter_mut().zip(&scales) {
            *c /= s;
        }
        fit.refresh_support();
        return Ok(fit);
    }
    let n = data.n() as f64;
    let pen: Vec<f64> = penalty.weights.iter().map(|w| n * penalty.lambda * w).collect();
    let mut eng = Engine::new(data, loss, pen, init);
    let stats = eng.run(
        config.max_cd_sweeps,
        config.tolerance,
        ExactBudget { full_limit: config.working_set_above, max_steps: config.max_vertex_steps },
        config.trace,
    );
    let objective = eng.value();
    let mut fit = SparseFit::new(eng.theta, eng.beta, objective);
    fit.iterations_used = stats.sweeps;
    fit.converged = stats.converged;
    fit.sweep_objectives = stats.trace;
    Ok(fit)
}

/// Iterative SCAD fit: a uniform-weight Lasso start, then weighted Lasso
/// refits with `d_j = scad_weight(theta_j^{(t-1)}) / lambda` until the
/// coefficients settle and the support is stable.
pub fn fit_scad_lla(
    data: &Dataset,
    loss: &LossSpec,
    lambda: f64,
    scad_b: f64,
    config: &SolverConfig,
) -> Result<SparseFit> {
    fit_scad_lla_from(data, loss, lambda, scad_b, None, config)
}

/// [`fit_scad_lla`] with a warm start for the initial Lasso solve.
pub fn fit_scad_lla_from(
    data: &Dataset,
    loss: &LossSpec,
    lambda: f64,
    scad_b: f64,
    init: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<SparseFit> {
    if !(lambda > 0.0) {
        return input(format!("SCAD fit needs lambda > 0, got {lambda}"));
    }
    let p = data.p();
    let mut penalty = PenaltyConfig { lambda, weights: vec![1.0; p], scad_b };
    penalty.validate()?;
    let mut current = fit_weighted_lasso(data, loss, &penalty, init, config)?;
    let mut sweeps = current.iterations_used;
    let mut all_converged = current.converged;
    let mut trace = std::mem::take(&mut current.sweep_objectives);
    let mut stable = 0usize;
    let mut settled = false;
    let mut outer = 0usize;
    while outer < config.max_outer_iterations {
        outer += 1;
        penalty.weights = current.coefficients.iter().map(|c| scad_weight(*c, lambda, scad_b) / lambda).collect();
        let mut next = fit_weighted_lasso(data, loss, &penalty, Some(&current.coefficients), config)?;
        sweeps += next.iterations_used;
        all_converged &= next.converged;
        trace.append(&mut next.sweep_objectives);
        let change = next.coefficients.iter().zip(&current.coefficients).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if next.support == current.support {
            stable += 1;
        } else {
            stable = 0;
        }
        current = next;
        if change < config.tolerance && stable >= config.support_stability_rounds {
            settled = true;
            break;
        }
    }
    current.iterations_used = sweeps.max(outer);
    current.converged = settled && all_converged;
    current.sweep_objectives = trace;
    Ok(current)
}

/// Smallest `lambda` at which the zero vector is a coordinate-wise minimum of
/// the uniform-weight Lasso, read off the subgradient at the intercept-only fit.
pub fn lambda_max(data: &Dataset, loss: &LossSpec) -> Result<f64> {
    check_data(data, loss)?;
    let p = data.p();
    let n = data.n();
    let mut eng = Engine::new(data, loss, vec![0.0; p], None);
    eng.update_intercepts();
    let mut best = 0.0f64;
    for j in 0..p {
        let col = eng.column(j);
        let need = match eng.levels() {
            None => {
                let b = eng.beta[0];
                col.iter().zip(&eng.e).map(|(x, e)| x * (e - b)).sum::<f64>().abs()
            }
            Some(levels) => {
                // pen must make right >= 0 and left <= 0
                let (mut right, mut left) = (0.0, 0.0);
                for (lv, b) in levels.iter().zip(&eng.beta) {
                    for (x, e) in col.iter().zip(&eng.e) {
                        let r = e - b;
                        if r > 0.0 {
                            right -= x * lv.w_pos;
                            left -= x * lv.w_pos;
                        } else if r < 0.0 {
                            right += x * lv.w_neg;
                            left += x * lv.w_neg;
                        } else if *x > 0.0 {
                            right += x * lv.w_neg;
                            left -= x * lv.w_pos;
                        } else {
                            right -= x * lv.w_pos;
                            left += x * lv.w_neg;
                        }
                    }
                }
                (-right).max(left).max(0.0)
            }
        };
        best = best.max(need);
    }
    Ok(best / n as f64)
}

/// Unpenalized fit with coefficients outside `support` fixed at zero.
pub fn fit_restricted(data: &Dataset, loss: &LossSpec, support: &[usize], config: &SolverConfig) -> Result<SparseFit> {
    check_data(data, loss)?;
    config.validate()?;
    let p = data.p();
    let mut support = support.to_vec();
    support.sort_unstable();
    support.dedup();
    if support.iter().any(|&j| j >= p) {
        return input(format!("support {support:?} out of range for {p} predictors"));
    }
    if support.len() >= data.n() {
        return input(format!("support of size {} needs more than {} observations", support.len(), data.n()));
    }
    let sub = data.select_columns(&support)?;
    let ols = least_squares(&sub).ok_or_else(|| Error::RankDeficient { support: support.clone() })?;
    let mut fit = if loss.is_smooth() {
        let (b, theta) = ols;
        let r = data.residuals(&expand(&theta, &support, p))?;
        let obj = 0.5 * r.iter().map(|v| (v - b) * (v - b)).sum::<f64>();
        SparseFit::new(theta, vec![b], obj)
    } else {
        let penalty = PenaltyConfig::new(0.0, vec![0.0; support.len()])?;
        let mut inner = config.clone();
        inner.standardize = false;
        fit_weighted_lasso(&sub, loss, &penalty, Some(&ols.1), &inner)?
    };
    fit.coefficients = expand(&fit.coefficients, &support, p);
    fit.refresh_support();
    Ok(fit)
}

fn expand(values: &[f64], support: &[usize], p: usize) -> Vec<f64> {
    let mut full = vec![0.0; p];
    for (v, &j) in values.iter().zip(support) {
        full[j] = *v;
    }
    full
}

/// Intercept and slopes of the least-squares fit; `None` when rank deficient.
fn least_squares(data: &Dataset) -> Option<(f64, Vec<f64>)> {
    let n = data.n();
    let q = data.p();
    let design = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { data.x()[(i, j - 1)] });
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 1e-10 * smax.max(1e-300)) {
        return None;
    }
    let sol: DVector<f64> = svd.solve(data.y(), 0.0).ok()?;
    Some((sol[0], sol.iter().skip(1).copied().collect()))
}
