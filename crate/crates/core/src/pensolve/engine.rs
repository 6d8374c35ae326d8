//! Cyclic coordinate descent on `sum loss + sum_j pen_j |theta_j|`.
//!
//! Coefficient updates are exact univariate minimizations: soft-thresholding
//! for the squared loss, a weighted breakpoint (median) search for the
//! check-type losses. Intercepts are unpenalized and updated exactly.

use crate::lincore::{check, CheckLevel, Dataset, LossSpec};
use crate::pensolve::breakpoint::KnotSet;

#[derive(Debug, Clone)]
pub(crate) enum Objective {
    /// `0.5 * sum (e_i - beta)^2`
    Squared,
    /// `sum_l sum_i check_l(e_i - beta_l)`
    Check(Vec<CheckLevel>),
}

impl Objective {
    pub fn of(loss: &LossSpec) -> Self {
        match loss.check_levels() {
            Some(levels) => Objective::Check(levels),
            None => Objective::Squared,
        }
    }
}

pub(crate) struct Engine<'a> {
    pub x: &'a [f64],
    pub n: usize,
    pub p: usize,
    pub objective: Objective,
    pub pen: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// `y - X theta`, intercepts excluded.
    pub e: Vec<f64>,
    col_sq: Vec<f64>,
    knots: KnotSet,
    scratch: Vec<f64>,
}

pub(crate) struct RunStats {
    pub sweeps: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(data: &'a Dataset, loss: &LossSpec, pen: Vec<f64>, init: Option<&[f64]>) -> Self {
        let n = data.n();
        let p = data.p();
        let x = data.x().as_slice();
        let theta = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
        let mut e = data.y().as_slice().to_vec();
        for (j, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                for (ei, xij) in e.iter_mut().zip(&x[j * n..(j + 1) * n]) {
                    *ei -= xij * t;
                }
            }
        }
        let objective = Objective::of(loss);
        let col_sq = match objective {
            Objective::Squared => (0..p).map(|j| x[j * n..(j + 1) * n].iter().map(|v| v * v).sum()).collect(),
            Objective::Check(_) => Vec::new(),
        };
        let n_beta = loss.n_intercepts();
        let warm = init.is_some();
        let mut eng = Self {
            x,
            n,
            p,
            objective,
            pen,
            theta,
            beta: vec![0.0; n_beta],
            e,
            col_sq,
            knots: KnotSet::default(),
            scratch: Vec::with_capacity(n),
        };
        // a warm start keeps its coefficients, so intercepts should match them
        if warm {
            eng.update_intercepts();
        }
        eng
    }

    #[inline]
    pub fn column(&self, j: usize) -> &'a [f64] {
        &self.x[j * self.n..(j + 1) * self.n]
    }

    pub fn levels(&self) -> Option<&[CheckLevel]> {
        match &self.objective {
            Objective::Check(levels) => Some(levels),
            Objective::Squared => None,
        }
    }

    pub fn value(&self) -> f64 {
        let penalty: f64 = self.theta.iter().zip(&self.pen).map(|(t, w)| w * t.abs()).sum();
        let loss: f64 = match &self.objective {
            Objective::Squared => {
                let b = self.beta[0];
                0.5 * self.e.iter().map(|ei| (ei - b) * (ei - b)).sum::<f64>()
            }
            Objective::Check(levels) => levels
                .iter()
                .zip(&self.beta)
                .map(|(lv, b)| {
                    let tau = lv.w_pos / (lv.w_pos + lv.w_neg);
                    let scale = lv.w_pos + lv.w_neg;
                    scale * self.e.iter().map(|ei| check(tau, ei - b)).sum::<f64>()
                })
                .sum(),
        };
        loss + penalty
    }

    /// Exact intercept updates; returns the largest change.
    pub fn update_intercepts(&mut self) -> f64 {
        let n = self.n;
        match &self.objective {
            Objective::Squared => {
                let mean = self.e.iter().sum::<f64>() / n as f64;
                let change = (mean - self.beta[0]).abs();
                self.beta[0] = mean;
                change
            }
            Objective::Check(levels) => {
                let mut change = 0.0f64;
                for (l, lv) in levels.iter().enumerate() {
                    let tau = lv.w_pos / (lv.w_pos + lv.w_neg);
                    let k = lower_rank(n, tau);
                    self.scratch.clear();
                    self.scratch.extend_from_slice(&self.e);
                    let (_, kth, _) = self.scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
                    let b = *kth;
                    change = change.max((b - self.beta[l]).abs());
                    self.beta[l] = b;
                }
                change
            }
        }
    }

    /// Exact minimization over coordinate `j`; returns the absolute change.
    pub fn update_coordinate(&mut self, j: usize) -> f64 {
        let col = self.column(j);
        let old = self.theta[j];
        let pen = self.pen[j];
        let new = match &self.objective {
            Objective::Squared => {
                let sq = self.col_sq[j];
                if sq == 0.0 {
                    0.0
                } else {
                    let b = self.beta[0];
                    let rho: f64 = col.iter().zip(&self.e).map(|(xi, ei)| xi * (ei - b)).sum::<f64>() + old * sq;
                    soft_threshold(rho, pen) / sq
                }
            }
            Objective::Check(levels) => {
                if old == 0.0 && zero_is_optimal(col, &self.e, &self.beta, levels, pen) {
                    return 0.0;
                }
                self.knots.clear();
                for (lv, b) in levels.iter().zip(&self.beta) {
                    for (xi, ei) in col.iter().zip(&self.e) {
                        if *xi != 0.0 {
                            self.knots.push(ei + xi * old - b, *xi, lv.w_pos, lv.w_neg);
                        }
                    }
                }
                self.knots.push_abs(0.0, pen);
                // staying put on a flat stretch avoids cycling between its ends
                if self.knots.is_minimizer(old) {
                    return 0.0;
                }
                match self.knots.minimizer() {
                    Some(t) => {
                        if t == 0.0 {
                            0.0
                        } else {
                            t
                        }
                    }
                    None => 0.0,
                }
            }
        };
        let delta = new - old;
        if delta != 0.0 {
            for (ei, xi) in self.e.iter_mut().zip(col) {
                *ei -= xi * delta;
            }
            self.theta[j] = new;
        }
        delta.abs()
    }

    /// Coefficients in index order, then the intercepts.
    pub fn sweep(&mut self) -> f64 {
        let mut change = 0.0f64;
        for j in 0..self.p {
            change = change.max(self.update_coordinate(j));
        }
        change.max(self.update_intercepts())
    }

    /// Sweeps until the largest change falls below `tol`. Check-type
    /// objectives hand over to the exact vertex phase once a sweep settles or
    /// stops making progress; coordinate descent is only resumed if that
    /// phase cannot certify a minimum.
    pub fn run(&mut self, max_sweeps: usize, tol: f64, exact: ExactBudget, trace: bool) -> RunStats {
        let mut stats = RunStats { sweeps: 0, converged: false, trace: Vec::new() };
        let mut exact_trace = trace.then(Vec::new);
        let mut pending = matches!(self.objective, Objective::Check(_));
        let mut last = self.value();
        while stats.sweeps < max_sweeps {
            let change = self.sweep();
            stats.sweeps += 1;
            let value = self.value();
            if trace {
                stats.trace.push(value);
            }
            let settled = change < tol;
            let slow = last - value <= 1e-3 * (1.0 + value.abs());
            last = value;
            if pending && (settled || slow) {
                pending = false;
                let run = self.exact_phase(exact.full_limit, exact.max_steps, &mut exact_trace);
                stats.sweeps += run.steps;
                if let Some(t) = exact_trace.as_mut() {
                    stats.trace.append(t);
                }
                if run.optimal {
                    stats.converged = true;
                    break;
                }
                last = self.value();
                continue;
            }
            if settled {
                stats.converged = true;
                break;
            }
        }
        stats
    }
}

/// Limits for the exact phase of check-type fits.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ExactBudget {
    pub full_limit: usize,
    pub max_steps: usize,
}

/// 1-based rank of the lower `tau` sample quantile, `ceil(n tau)`.
pub(crate) fn lower_rank(n: usize, tau: f64) -> usize {
    let q = n as f64 * tau;
    let k = (q - 1e-9 * q.max(1.0)).ceil() as usize;
    k.clamp(1, n)
}

#[inline]
fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// One-sided derivatives at `theta_j = 0` bracket zero.
fn zero_is_optimal(col: &[f64], e: &[f64], beta: &[f64], levels: &[CheckLevel], pen: f64) -> bool {
    let mut right = pen;
    let mut left = -pen;
    for (lv, b) in levels.iter().zip(beta) {
        for (xi, ei) in col.iter().zip(e) {
            let x = *xi;
            if x == 0.0 {
                continue;
            }
            let r = ei - b;
            if r > 0.0 {
                right -= x * lv.w_pos;
                left -= x * lv.w_pos;
            } else if r < 0.0 {
                right += x * lv.w_neg;
                left += x * lv.w_neg;
            } else if x > 0.0 {
                right += x * lv.w_neg;
                left -= x * lv.w_pos;
            } else {
                right -= x * lv.w_pos;
                left += x * lv.w_neg;
            }
        }
    }
    right >= 0.0 && left <= 0.0
}
