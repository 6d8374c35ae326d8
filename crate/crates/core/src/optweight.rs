//! Efficiency machinery for combining quantile refits.
//!
//! Residuals of the averaged refit give kernel density estimates of the error
//! density at its quantiles; these fill the asymptotic covariance kernel
//! `H_ij = {min(tau_i, tau_j) - tau_i tau_j} / {f(beta_i) f(beta_j)}`, whose
//! inverse yields the variance-minimizing weights `H^-1 r / (r^T H^-1 r)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{dimension, input, Error, Result};
use crate::lincore::{Dataset, SparseFit};
use crate::pensolve::lower_rank;

/// Condition number above which the estimated kernel is treated as singular.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Serialize)]
pub struct WeightPlan {
    pub tau: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub f_hat: Vec<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub h_hat: DMatrix<f64>,
    pub w_star: Vec<f64>,
    pub bandwidth: f64,
    pub condition: f64,
    /// Set when the kernel was too ill-conditioned and uniform weights were used.
    pub uniform_fallback: bool,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.row_iter() {
        seq.serialize_element(&row.iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}

/// Residuals `y - X theta0` of the uniformly averaged slopes `theta0 = mean_k theta_k`.
pub fn residuals(data: &Dataset, fits: &[SparseFit]) -> Result<DVector<f64>> {
    if fits.is_empty() {
        return input("need at least one fit");
    }
    let p = data.p();
    if let Some(f) = fits.iter().find(|f| f.p() != p) {
        return dimension(format!("fit has {} coefficients for {p} predictors", f.p()));
    }
    let k = fits.len() as f64;
    let avg: Vec<f64> = (0..p).map(|j| fits.iter().map(|f| f.coefficients[j]).sum::<f64>() / k).collect();
    data.residuals(&avg)
}

/// Lower step sample quantile `x_(ceil(n tau))`.
pub fn sample_quantile(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    let k = lower_rank(v.len(), tau);
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Rule-of-thumb bandwidth `0.9 n^(-1/5) min(SD, IQR / 1.34)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let iqr = sample_quantile(values, 0.75) - sample_quantile(values, 0.25);
    0.9 * n.powf(-0.2) * sample_sd(values).min(iqr / 1.34)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileDensity {
    pub beta_hat: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub bandwidth: f64,
}

/// Gaussian-kernel density estimates at the sample `tau_k` quantiles.
pub fn kde_at_quantiles(residuals: &[f64], tau: &[f64]) -> Result<QuantileDensity> {
    let n = residuals.len();
    if n < 10 {
        return input(format!("density estimation needs at least 10 residuals, got {n}"));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return input("non-finite residuals");
    }
    if tau.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return input("quantile levels must lie in (0, 1)");
    }
    let h = silverman_bandwidth(residuals);
    if !(h > 0.0) {
        return Err(Error::Numerical(format!("degenerate residuals give bandwidth {h}")));
    }
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let beta_hat: Vec<f64> = tau.iter().map(|t| sample_quantile(residuals, *t)).collect();
    let f_hat = beta_hat
        .iter()
        .map(|b| {
            norm * residuals
                .iter()
                .map(|e| {
                    let z = (b - e) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(QuantileDensity { beta_hat, f_hat, bandwidth: h })
}

/// `R_ij = min(tau_i, tau_j) - tau_i tau_j`.
pub fn quantile_covariance(tau: &[f64]) -> DMatrix<f64> {
    let k = tau.len();
    DMatrix::from_fn(k, k, |i, j| tau[i].min(tau[j]) - tau[i] * tau[j])
}

pub fn h_hat(tau: &[f64], f_hat: &[f64]) -> Result<DMatrix<f64>> {
    if tau.len() != f_hat.len() {
        return dimension(format!("{} levels but {} density values", tau.len(), f_hat.len()));
    }
    if let Some(f) = f_hat.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return input(format!("density values must be positive, got {f}"));
    }
    let r = quantile_covariance(tau);
    let k = tau.len();
    Ok(DMatrix::from_fn(k, k, |i, j| r[(i, j)] / (f_hat[i] * f_hat[j])))
}

/// Closed-form inverse of `H` for levels `k / (K + 1)`: tridiagonal with
/// diagonal `2 (K+1) f_i^2` and off-diagonal `-(K+1) f_i f_{i+1}`.
pub fn analytic_h_inverse(tau: &[f64], f: &[f64]) -> Result<DMatrix<f64>> {
    let k = tau.len();
    if k == 0 || f.len() != k {
        return dimension(format!("{k} levels but {} density values", f.len()));
    }
    let step = 1.0 / (k + 1) as f64;
    for (i, t) in tau.iter().enumerate() {
        if (t - (i + 1) as f64 * step).abs() > 1e-12 {
            return input("closed-form inverse needs levels k / (K + 1)");
        }
    }
    let kp1 = (k + 1) as f64;
    let mut inv = DMatrix::zeros(k, k);
    for i in 0..k {
        inv[(i, i)] = 2.0 * kp1 * f[i] * f[i];
        if i + 1 < k {
            let off = -kp1 * f[i] * f[i + 1];
            inv[(i, i + 1)] = off;
            inv[(i + 1, i)] = off;
        }
    }
    Ok(inv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalWeights {
    pub weights: Vec<f64>,
    /// Spectral condition number of `H`.
    pub condition: f64,
}

/// `w* = H^-1 r / (r^T H^-1 r)`, the minimizer of `w^T H w` subject to `sum w = 1`.
pub fn optimal_weights(h: &DMatrix<f64>) -> Result<OptimalWeights> {
    let k = h.nrows();
    if k == 0 || h.ncols() != k {
        return dimension("weight kernel must be a nonempty square matrix");
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("weight kernel has non-finite entries".into()));
    }
    let asym = (h - h.transpose()).abs().max();
    if asym > 1e-10 * h.abs().max().max(1e-300) {
        return input("weight kernel is not symmetric");
    }
    let eig = SymmetricEigen::new(h.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("weight kernel is not positive definite (condition {condition:e})")))?;
    if !condition.is_finite() {
        return Err(Error::Numerical("weight kernel is singular".into()));
    }
    let hinv_r = chol.solve(&DVector::from_element(k, 1.0));
    let total: f64 = hinv_r.sum();
    if !(total > 0.0) {
        return Err(Error::Numerical(format!("degenerate weight normalization {total}")));
    }
    Ok(OptimalWeights { weights: hinv_r.iter().map(|v| v / total).collect(), condition })
}

/// `xi = R^-1 psi` with `psi = (f(beta_1), ..., f(beta_K))`.
pub fn xi_weights(tau: &[f64], f_hat: &[f64]) -> Result<Vec<f64>> {
    if tau.len() != f_hat.len() {
        return dimension("levels and density values differ in length");
    }
    let r = quantile_covariance(tau);
    let chol = r.cholesky().ok_or_else(|| Error::Numerical("quantile covariance is not positive definite".into()))?;
    Ok(chol.solve(&DVector::from_column_slice(f_hat)).iter().copied().collect())
}

/// Coefficientwise combination `sum_k w_k theta_k`; every fit must vanish
/// outside `voted`. Intercepts are combined with the same weights when the
/// fits agree on their count.
pub fn combine(fits: &[SparseFit], weights: &[f64], voted: &[usize]) -> Result<SparseFit> {
    if fits.is_empty() || fits.len() != weights.len() {
        return dimension(format!("{} fits with {} weights", fits.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return input(format!("weights sum to {total}, not 1"));
    }
    let p = fits[0].p();
    for f in fits {
        if f.p() != p {
            return dimension("fits differ in dimension");
        }
        if let Some(j) = f.support.iter().find(|j| voted.binary_search(j).is_err()) {
            return input(format!("fit has coefficient {j} outside the voted support"));
        }
    }
    if fits.len() == 1 {
        return Ok(fits[0].clone());
    }
    let mut coefficients = vec![0.0; p];
    for &j in voted {
        coefficients[j] = fits.iter().zip(weights).map(|(f, w)| w * f.coefficients[j]).sum();
    }
    for (k, w) in weights.iter().enumerate() {
        if *w == 1.0 && weights.iter().enumerate().all(|(i, v)| i == k || *v == 0.0) {
            return Ok(fits[k].clone());
        }
    }
    let m = fits[0].intercepts.len();
    let intercepts = if fits.iter().all(|f| f.intercepts.len() == m) {
        (0..m).map(|l| fits.iter().zip(weights).map(|(f, w)| w * f.intercepts[l]).sum()).collect()
    } else {
        Vec::new()
    };
    let mut fit = SparseFit::new(coefficients, intercepts, f64::NAN);
    fit.converged = fits.iter().all(|f| f.converged);
    Ok(fit)
}

/// Remark-style estimate of the weight plan for refits at levels `tau`,
/// falling back to uniform weights when `H` is ill-conditioned.
pub fn weight_plan(data: &Dataset, fits: &[SparseFit], tau: &[f64]) -> Result<WeightPlan> {
    if fits.len() != tau.len() {
        return dimension(format!("{} refits for {} levels", fits.len(), tau.len()));
    }
    let resid = residuals(data, fits)?;
    let dens = kde_at_quantiles(resid.as_slice(), tau)?;
    let h = h_hat(tau, &dens.f_hat)?;
    let k = tau.len();
    let (w_star, condition, uniform_fallback) = match optimal_weights(&h) {
        Ok(ow) if ow.condition <= MAX_CONDITION => (ow.weights, ow.condition, false),
        Ok(ow) => (vec![1.0 / k as f64; k], ow.condition, true),
        Err(_) => (vec![1.0 / k as f64; k], f64::INFINITY, true),
    };
    Ok(WeightPlan {
        tau: tau.to_vec(),
        beta_hat: dens.beta_hat,
        f_hat: dens.f_hat,
        h_hat: h,
        w_star,
        bandwidth: dens.bandwidth,
        condition,
        uniform_fallback,
    })
}

/// Error densities with closed-form density and quantile function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ErrorDensity {
    Normal { variance: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl ErrorDensity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ErrorDensity::Normal { variance } if !(variance > 0.0 && variance.is_finite()) => {
                input(format!("normal variance must be positive, got {variance}"))
            }
            ErrorDensity::Uniform { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => {
                input(format!("uniform support ({lo}, {hi}) is empty"))
            }
            _ => Ok(()),
        }
    }

    /// `g(tau) = f(F^-1(tau))`.
    pub fn density_at_quantile(&self, tau: f64) -> f64 {
        match *self {
            ErrorDensity::Normal { variance } => {
                let dist = Normal::new(0.0, variance.sqrt()).expect("validated variance");
                dist.pdf(dist.inverse_cdf(tau))
            }
            ErrorDensity::Uniform { lo, hi } => 1.0 / (hi - lo),
        }
    }

    /// Location Fisher information; infinite for bounded support.
    pub fn fisher_information(&self) -> f64 {
        match *self {
            ErrorDensity::Normal { variance } => 1.0 / variance,
            ErrorDensity::Uniform { .. } => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherRow {
    pub k: usize,
    /// `r^T H^-1 r` with the true density at levels `k / (K + 1)`.
    pub value: f64,
    /// `max |H H^-1 - I|` between the numeric kernel and the closed-form inverse.
    pub inverse_residual: f64,
    /// `max |A - N| / max |A|` between the closed-form inverse `A` and an
    /// LU inverse `N` of the numeric kernel.
    pub inverse_deviation: f64,
}

/// `r^T H^-1 r` per `K`, from the true density at the equispaced quantiles.
pub fn fisher_limit_check(density: &ErrorDensity, k_values: &[usize]) -> Result<Vec<FisherRow>> {
    density.validate()?;
    k_values
        .iter()
        .map(|&k| {
            if k == 0 {
                return input("K must be positive");
            }
            let tau = crate::lincore::equispaced_levels(k);
            let f: Vec<f64> = tau.iter().map(|t| density.density_at_quantile(*t)).collect();
            let inv = analytic_h_inverse(&tau, &f)?;
            let h = h_hat(&tau, &f)?;
            let prod = &h * &inv;
            let inverse_residual = (prod - DMatrix::<f64>::identity(k, k)).abs().max();
            let numeric =
                h.clone().try_inverse().ok_or_else(|| Error::Numerical(format!("kernel for K = {k} is singular")))?;
            let inverse_deviation = (&inv - numeric).abs().max() / inv.abs().max();
            Ok(FisherRow { k, value: inv.sum(), inverse_residual, inverse_deviation })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kernel() {
        let h = h_hat(&[0.5], &[0.4]).unwrap();
        assert!((h[(0, 0)] - 1.5625).abs() < 1e-12);
        let inv = analytic_h_inverse(&[0.5], &[0.4]).unwrap();
        assert!((inv[(0, 0)] - 4.0 * 0.16).abs() < 1e-12);
        assert!((inv[(0, 0)] * h[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_level_kernel() {
        let h = h_hat(&[1.0 / 3.0, 2.0 / 3.0], &[1.0, 1.0]).unwrap();
        let want = [[2.0 / 9.0, 1.0 / 9.0], [1.0 / 9.0, 2.0 / 9.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[(i, j)] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_factorizes_as_covariance_over_densities() {
        let tau = [0.1, 0.4, 0.8];
        let f = [0.3, 1.2, 0.7];
        let h = h_hat(&tau, &f).unwrap();
        let r = quantile_covariance(&tau);
        for i in 0..3 {
            for j in 0..3 {
                assert!((h[(i, j)] * f[i] * f[j] - r[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_errors() {
        assert!(h_hat(&[0.5], &[0.0]).is_err());
        assert!(h_hat(&[0.5, 0.6], &[1.0]).is_err());
        assert!(analytic_h_inverse(&[0.2, 0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn closed_form_sum_identity() {
        let k = 9;
        let tau = crate::lincore::equispaced_levels(k);
        let f = vec![1.0; k];
        let inv = analytic_h_inverse(&tau, &f).unwrap();
        let sq: f64 = f.iter().map(|v| v * v).sum();
        let cross: f64 = f.windows(2).map(|w| w[0] * w[1]).sum();
        assert!((inv.sum() - 2.0 * (k as f64 + 1.0) * (sq - cross)).abs() < 1e-12);
    }

    #[test]
    fn weights_for_simple_kernels() {
        let w = optimal_weights(&DMatrix::identity(3, 3)).unwrap();
        for v in &w.weights {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = optimal_weights(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))).unwrap();
        assert!((w.weights[0] - 0.8).abs() < 1e-15);
        assert!((w.weights[1] - 0.2).abs() < 1e-15);
        assert!((w.condition - 4.0).abs() < 1e-12);
    }

    #[test]
    fn weights_reject_bad_kernels() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(optimal_weights(&indefinite).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(optimal_weights(&singular).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(optimal_weights(&asym).is_err());
    }

    #[test]
    fn weights_ignore_kernel_scale() {
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let a = optimal_weights(&h).unwrap();
        let b = optimal_weights(&(h * 17.5)).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn fit(coef: Vec<f64>) -> SparseFit {
        SparseFit::new(coef, vec![0.5], 0.0)
    }

    #[test]
    fn combine_cases() {
        let a = fit(vec![1.0, 0.0, 2.0]);
        let b = fit(vec![3.0, 0.0, -2.0]);
        let same = combine(&[a.clone(), a.clone()], &[0.5, 0.5], &[0, 2]).unwrap();
        assert_eq!(same.coefficients, a.coefficients);
        let single = combine(std::slice::from_ref(&b), &[1.0], &[0, 2]).unwrap();
        assert_eq!(single, b);
        let first = combine(&[a.clone(), b.clone()], &[1.0, 0.0], &[0, 2]).unwrap();
        assert_eq!(first, a);
        let mix = combine(&[a.clone(), b.clone()], &[0.25, 0.75], &[0, 2]).unwrap();
        assert_eq!(mix.coefficients[1], 0.0);
        assert!((mix.coefficients[0] - 2.5).abs() < 1e-15);
        assert!(combine(&[a.clone(), b.clone()], &[0.5, 0.6], &[0, 2]).is_err());
        assert!(combine(&[a, b], &[0.5, 0.5], &[0]).is_err());
    }

    #[test]
    fn bandwidth_needs_spread() {
        assert!(kde_at_quantiles(&[1.0; 20], &[0.5]).is_err());
        assert!(kde_at_quantiles(&[1.0, 2.0, 3.0], &[0.5]).is_err());
    }

    #[test]
    fn density_translation_and_scaling() {
        let base: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 7.0 + (i as f64).sin()).collect();
        let tau = [0.25, 0.5, 0.75];
        let a = kde_at_quantiles(&base, &tau).unwrap();
        let shifted: Vec<f64> = base.iter().map(|v| v + 3.25).collect();
        let b = kde_at_quantiles(&shifted, &tau).unwrap();
        for k in 0..3 {
            assert!((b.beta_hat[k] - a.beta_hat[k] - 3.25).abs() < 1e-12);
            assert!((b.f_hat[k] - a.f_hat[k]).abs() < 1e-12);
        }
        let c = 2.5;
        let scaled: Vec<f64> = base.iter().map(|v| v * c).collect();
        let s = kde_at_quantiles(&scaled, &tau).unwrap();
        assert!((s.bandwidth - c * a.bandwidth).abs() < 1e-12);
        for k in 0..3 {
            assert!((s.f_hat[k] - a.f_hat[k] / c).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_of_averaged_fit() {
        let data = Dataset::from_rows(vec![1.0, 2.0, 3.0], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let zero = residuals(&data, &[fit(vec![0.0, 0.0])]).unwrap();
        assert_eq!(zero.as_slice(), &[1.0, 2.0, 3.0]);
        let exact = fit(vec![1.0, 2.0]);
        let r = residuals(&data, &[exact.clone(), exact.clone(), exact]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        assert!(residuals(&data, &[fit(vec![1.0])]).is_err());
    }
}
