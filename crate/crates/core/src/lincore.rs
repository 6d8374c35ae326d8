//! Shared domain types: datasets, loss functions with their subgradients,
//! and the sparse fit record produced by every solver.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, input, Error, Result};

/// Response vector plus design matrix. Row `i` of `x` is the predictor vector
/// of observation `i`; the model carries no intercept column, intercepts are
/// estimated by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    column_names: Option<Vec<String>>,
    response_name: Option<String>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, column_names: Option<Vec<String>>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return input(format!("dataset needs at least 2 observations, got {n}"));
        }
        if x.nrows() != n {
            return dimension(format!("design has {} rows but response has {n}", x.nrows()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return input("dataset contains non-finite values");
        }
        if let Some(names) = &column_names {
            if names.len() != x.ncols() {
                return dimension(format!("{} column names for {} predictors", names.len(), x.ncols()));
            }
            let mut seen = HashSet::new();
            if let Some(dup) = names.iter().find(|nm| !seen.insert(nm.as_str())) {
                return input(format!("duplicate column name {dup:?}"));
            }
        }
        Ok(Self { y, x, column_names, response_name: None })
    }

    /// Builds a dataset from row-major predictor rows.
    pub fn from_rows(y: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return dimension("ragged predictor rows");
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(DVector::from_vec(y), x, None)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn with_response_name(mut self, name: Option<String>) -> Self {
        self.response_name = name;
        self
    }

    pub fn response_name(&self) -> Option<&str> {
        self.response_name.as_deref()
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Name of predictor `j`, falling back to its 1-based position.
    pub fn column_label(&self, j: usize) -> String {
        match &self.column_names {
            Some(names) => names[j].clone(),
            None => (j + 1).to_string(),
        }
    }

    /// Observations at the given row indices, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&r| r >= self.n()) {
            return input("row index out of range");
        }
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        let x = self.x.select_rows(rows);
        Ok(Self::new(y, x, self.column_names.clone())?.with_response_name(self.response_name.clone()))
    }

    /// Predictors restricted to `columns`, in that order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if columns.iter().any(|&c| c >= self.p()) {
            return input("column index out of range");
        }
        let x = self.x.select_columns(columns);
        let names = self.column_names.as_ref().map(|nm| columns.iter().map(|&c| nm[c].clone()).collect());
        Ok(Self::new(self.y.clone(), x, names)?.with_response_name(self.response_name.clone()))
    }

    /// `y_i - x_i^T theta` for every observation (intercepts excluded).
    pub fn residuals(&self, coefficients: &[f64]) -> Result<DVector<f64>> {
        if coefficients.len() != self.p() {
            return dimension(format!("{} coefficients for {} predictors", coefficients.len(), self.p()));
        }
        let mut r = self.y.clone();
        for (j, &t) in coefficients.iter().enumerate() {
            if t != 0.0 {
                r.axpy(-t, &self.x.column(j), 1.0);
            }
        }
        Ok(r)
    }
}

/// A loss function used either to select variables or to estimate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    QuantileCheck { tau: f64 },
    Squared,
    Absolute,
    CompositeQuantile { taus: Vec<f64> },
}

/// One check-type summand `w_pos * u_+ + w_neg * (-u)_+` of a piecewise-linear loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct CheckLevel {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl LossSpec {
    pub fn quantile(tau: f64) -> Result<Self> {
        let spec = LossSpec::QuantileCheck { tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn composite(taus: Vec<f64>) -> Result<Self> {
        let spec = LossSpec::CompositeQuantile { taus };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |t: f64| t > 0.0 && t < 1.0;
        match self {
            LossSpec::QuantileCheck { tau } if !inside(*tau) => input(format!("quantile level {tau} outside (0, 1)")),
            LossSpec::CompositeQuantile { taus } => {
                if taus.is_empty() {
                    return input("composite quantile loss needs at least one level");
                }
                if let Some(t) = taus.iter().find(|t| !inside(**t)) {
                    return input(format!("quantile level {t} outside (0, 1)"));
                }
                if taus.windows(2).any(|w| w[0] >= w[1]) {
                    return input("composite quantile levels must be strictly increasing");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Number of intercepts a fit under this loss carries.
    pub fn n_intercepts(&self) -> usize {
        match self {
            LossSpec::CompositeQuantile { taus } => taus.len(),
            _ => 1,
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self, LossSpec::Squared)
    }

    /// Quantile level of a single check loss.
    pub fn tau(&self) -> Option<f64> {
        match self {
            LossSpec::QuantileCheck { tau } => Some(*tau),
            _ => None,
        }
    }

    /// Piecewise-linear decomposition; `None` for the squared loss.
    pub(crate) fn check_levels(&self) -> Option<Vec<CheckLevel>> {
        match self {
            LossSpec::QuantileCheck { tau } => Some(vec![CheckLevel { w_pos: *tau, w_neg: 1.0 - tau }]),
            LossSpec::Absolute => Some(vec![CheckLevel { w_pos: 1.0, w_neg: 1.0 }]),
            LossSpec::CompositeQuantile { taus } => {
                Some(taus.iter().map(|t| CheckLevel { w_pos: *t, w_neg: 1.0 - t }).collect())
            }
            LossSpec::Squared => None,
        }
    }

    fn shifts<'a>(&self, intercepts: &'a [f64]) -> Result<&'a [f64]> {
        const ZERO: &[f64] = &[0.0];
        match self {
            LossSpec::Squared | LossSpec::Absolute => match intercepts.len() {
                0 => Ok(ZERO),
                1 => Ok(intercepts),
                m => dimension(format!("expected at most 1 intercept, got {m}")),
            },
            LossSpec::QuantileCheck { .. } => match intercepts.len() {
                0 => Ok(ZERO),
                1 => Ok(intercepts),
                m => dimension(format!("expected 1 intercept, got {m}")),
            },
            LossSpec::CompositeQuantile { taus } => {
                if intercepts.len() != taus.len() {
                    dimension(format!("expected {} intercepts, got {}", taus.len(), intercepts.len()))
                } else {
                    Ok(intercepts)
                }
            }
        }
    }

    /// Loss of a residual `x = y - x^T theta`, shifted by the intercept(s).
    pub fn loss_value(&self, residual: f64, intercepts: &[f64]) -> Result<f64> {
        let shifts = self.shifts(intercepts)?;
        Ok(self.loss_unchecked(residual, shifts))
    }

    /// Subgradient `psi` at the shifted residual. At kinks the right-hand value
    /// is returned (`I(0 < 0) = 0`).
    pub fn subgradient(&self, residual: f64, intercepts: &[f64]) -> Result<f64> {
        let shifts = self.shifts(intercepts)?;
        Ok(match self {
            LossSpec::QuantileCheck { tau } => check_psi(*tau, residual - shifts[0]),
            LossSpec::Squared => residual - shifts[0],
            LossSpec::Absolute => {
                let u = residual - shifts[0];
                if u < 0.0 {
                    -1.0
                } else if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LossSpec::CompositeQuantile { taus } => {
                taus.iter().zip(shifts).map(|(t, b)| check_psi(*t, residual - b)).sum()
            }
        })
    }

    pub(crate) fn loss_unchecked(&self, residual: f64, shifts: &[f64]) -> f64 {
        match self {
            LossSpec::QuantileCheck { tau } => check(*tau, residual - shifts[0]),
            LossSpec::Squared => {
                let u = residual - shifts[0];
                u * u
            }
            LossSpec::Absolute => (residual - shifts[0]).abs(),
            LossSpec::CompositeQuantile { taus } => taus.iter().zip(shifts).map(|(t, b)| check(*t, residual - b)).sum(),
        }
    }

    /// Total loss `sum_i loss(y_i - x_i^T theta)` of a fit on a dataset.
    pub fn total_loss(&self, data: &Dataset, fit: &SparseFit) -> Result<f64> {
        let shifts = self.shifts(&fit.intercepts)?;
        let r = data.residuals(&fit.coefficients)?;
        Ok(r.iter().map(|&ri| self.loss_unchecked(ri, shifts)).sum())
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::QuantileCheck { tau } => write!(f, "quantile@{tau}"),
            LossSpec::Squared => write!(f, "squared"),
            LossSpec::Absolute => write!(f, "absolute"),
            LossSpec::CompositeQuantile { taus } => write!(f, "composite[{}]", taus.len()),
        }
    }
}

impl std::str::FromStr for LossSpec {
    type Err = Error;

    /// `squared` (`ls`), `absolute` (`lad`), `quantile@TAU` (`q@TAU`),
    /// `composite` (`cqr`, the deciles) or `composite@T1/T2/...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once('@') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s, None),
        };
        let number = |a: &str| -> Result<f64> {
            a.parse::<f64>().map_err(|_| Error::Input(format!("bad quantile level {a:?} in loss {s:?}")))
        };
        let spec = match (head.to_ascii_lowercase().as_str(), arg) {
            ("squared" | "ls", None) => LossSpec::Squared,
            ("absolute" | "lad", None) => LossSpec::Absolute,
            ("quantile" | "q", Some(a)) => LossSpec::QuantileCheck { tau: number(a)? },
            ("composite" | "cqr", None) => LossSpec::CompositeQuantile { taus: decile_levels() },
            ("composite" | "cqr", Some(a)) => {
                LossSpec::CompositeQuantile { taus: a.split('/').map(number).collect::<Result<_>>()? }
            }
            _ => return input(format!("unknown loss {s:?}")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Comma-separated losses. Besides single losses (see [`LossSpec::from_str`])
/// the list accepts `deciles` for the nine check losses at `k / 10` and
/// `quantiles:K` for `K` equally spaced check losses.
pub fn parse_loss_list(spec: &str) -> Result<Vec<LossSpec>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if item.eq_ignore_ascii_case("deciles") {
            out.extend(decile_levels().into_iter().map(|tau| LossSpec::QuantileCheck { tau }));
        } else if let Some(k) = item.strip_prefix("quantiles:") {
            let k: usize = k.parse().map_err(|_| Error::Input(format!("bad level count in {item:?}")))?;
            if k == 0 {
                return input("quantiles:K needs K >= 1");
            }
            out.extend(equispaced_levels(k).into_iter().map(|tau| LossSpec::QuantileCheck { tau }));
        } else {
            out.push(item.parse()?);
        }
    }
    if out.is_empty() {
        return input("empty loss list");
    }
    Ok(out)
}

#[inline]
pub(crate) fn check(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

#[inline]
fn check_psi(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

/// Equally spaced levels `k / (count + 1)`, `k = 1..=count`.
pub fn equispaced_levels(count: usize) -> Vec<f64> {
    let denom = (count + 1) as f64;
    (1..=count).map(|k| k as f64 / denom).collect()
}

/// Levels `k / 10`, `k = 1..=9`.
pub fn decile_levels() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Coefficients, intercepts and solver diagnostics of a (possibly penalized) fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFit {
    pub coefficients: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub support: Vec<usize>,
    pub objective_value: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Penalized objective after every coordinate sweep, when tracing is enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_objectives: Vec<f64>,
}

impl SparseFit {
    pub fn new(coefficients: Vec<f64>, intercepts: Vec<f64>, objective_value: f64) -> Self {
        let support = support_of(&coefficients);
        Self {
            coefficients,
            intercepts,
            support,
            objective_value,
            iterations_used: 0,
            converged: true,
            sweep_objectives: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.coefficients.len()
    }

    pub(crate) fn refresh_support(&mut self) {
        self.support = support_of(&self.coefficients);
    }
}

pub fn support_of(coefficients: &[f64]) -> Vec<usize> {
    coefficients.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, _)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_lists_parse() {
        let list = parse_loss_list("deciles").unwrap();
        assert_eq!(list.len(), 9);
        assert_eq!(list[2], LossSpec::QuantileCheck { tau: 0.3 });
        let list = parse_loss_list("ls, lad,q@0.25, cqr, composite@0.25/0.75").unwrap();
        assert_eq!(list[0], LossSpec::Squared);
        assert_eq!(list[1], LossSpec::Absolute);
        assert_eq!(list[2], LossSpec::QuantileCheck { tau: 0.25 });
        assert_eq!(list[3], LossSpec::CompositeQuantile { taus: decile_levels() });
        assert_eq!(list[4], LossSpec::CompositeQuantile { taus: vec![0.25, 0.75] });
        assert_eq!(parse_loss_list("quantiles:3").unwrap()[1], LossSpec::QuantileCheck { tau: 0.5 });
        assert!(parse_loss_list("q@1.5").is_err());
        assert!(parse_loss_list("huber").is_err());
        assert!(parse_loss_list("").is_err());
    }

    #[test]
    fn check_loss_values() {
        let q5 = LossSpec::quantile(0.5).unwrap();
        assert_eq!(q5.loss_value(0.0, &[0.0]).unwrap(), 0.0);
        let q3 = LossSpec::quantile(0.3).unwrap();
        assert!((q3.loss_value(1.0, &[0.0]).unwrap() - 0.3).abs() < 1e-15);
        assert!((q3.loss_value(-1.0, &[0.0]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(LossSpec::Squared.loss_value(2.0, &[]).unwrap(), 4.0);
        // shifted form (x - beta){tau - I(x < beta)}
        assert!((q3.loss_value(2.0, &[1.0]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn subgradient_conventions() {
        let q3 = LossSpec::quantile(0.3).unwrap();
        assert!((q3.subgradient(1.0, &[0.0]).unwrap() - 0.3).abs() < 1e-15);
        assert!((q3.subgradient(0.0, &[0.0]).unwrap() - 0.3).abs() < 1e-15);
        assert!((q3.subgradient(-0.1, &[0.0]).unwrap() + 0.7).abs() < 1e-15);
        assert_eq!(LossSpec::Squared.subgradient(-1.5, &[]).unwrap(), -1.5);
        assert_eq!(LossSpec::Absolute.subgradient(-2.0, &[]).unwrap(), -1.0);
    }

    #[test]
    fn intercept_length_is_checked() {
        let cq = LossSpec::composite(vec![0.25, 0.5, 0.75]).unwrap();
        assert!(cq.loss_value(0.0, &[0.0]).is_err());
        assert!(cq.loss_value(0.0, &[0.0, 0.0, 0.0]).is_ok());
        assert!(LossSpec::Squared.loss_value(0.0, &[1.0, 2.0]).is_err());
        assert!(LossSpec::quantile(0.5).unwrap().subgradient(0.0, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn level_validation() {
        assert!(LossSpec::quantile(0.0).is_err());
        assert!(LossSpec::quantile(1.0).is_err());
        assert!(LossSpec::composite(vec![0.5, 0.4]).is_err());
        assert!(LossSpec::composite(vec![0.5, 0.5]).is_err());
        assert_eq!(equispaced_levels(3), vec![0.25, 0.5, 0.75]);
        assert_eq!(decile_levels().len(), 9);
    }

    #[test]
    fn dataset_invariants() {
        let x = DMatrix::from_element(3, 2, 1.0);
        let y = DVector::from_element(3, 1.0);
        assert!(Dataset::new(y.clone(), x.clone(), Some(vec!["a".into(), "a".into()])).is_err());
        assert!(Dataset::new(y.clone(), x.clone(), Some(vec!["a".into()])).is_err());
        assert!(Dataset::new(DVector::from_element(1, 1.0), DMatrix::zeros(1, 2), None).is_err());
        let mut bad = x.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(Dataset::new(y.clone(), bad, None).is_err());
        let ok = Dataset::new(y, x, Some(vec!["a".into(), "b".into()])).unwrap();
        assert_eq!(ok.column_label(1), "b");
        assert_eq!(ok.select_columns(&[1]).unwrap().column_names().unwrap(), ["b".to_string()]);
    }
}
