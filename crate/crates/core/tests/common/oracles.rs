//! Independent brute-force oracles for penalized regression objectives.
//!
//! Nothing here calls into the solver; the objective is written out directly
//! from its definition.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use votereg::{Dataset, LossSpec};

fn rho(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// Quantile levels and per-level scale of a check-type loss, or `None` for squared.
fn levels(loss: &LossSpec) -> Option<Vec<(f64, f64)>> {
    match loss {
        LossSpec::QuantileCheck { tau } => Some(vec![(*tau, 1.0)]),
        LossSpec::Absolute => Some(vec![(0.5, 2.0)]),
        LossSpec::CompositeQuantile { taus } => Some(taus.iter().map(|t| (*t, 1.0)).collect()),
        LossSpec::Squared => None,
    }
}

/// Loss part with every intercept minimized out exactly: by the mean for the
/// squared loss, by trying every residual as the shift for check losses
/// (a minimizer of a sum of check functions is always one of the data points).
pub fn profiled_loss(loss: &LossSpec, e: &[f64]) -> f64 {
    match levels(loss) {
        None => {
            let m = e.iter().sum::<f64>() / e.len() as f64;
            0.5 * e.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        }
        Some(lv) => lv
            .iter()
            .map(|&(tau, scale)| {
                e.iter().map(|&b| e.iter().map(|&v| rho(tau, v - b)).sum::<f64>()).fold(f64::INFINITY, f64::min) * scale
            })
            .sum(),
    }
}

/// `profiled loss + n lambda sum_j d_j |theta_j|` at `theta`.
pub fn penalized_at(data: &Dataset, loss: &LossSpec, lambda: f64, weights: &[f64], theta: &[f64]) -> f64 {
    let n = data.n();
    let e: Vec<f64> =
        (0..n).map(|i| data.y()[i] - (0..data.p()).map(|j| data.x()[(i, j)] * theta[j]).sum::<f64>()).collect();
    let pen: f64 = theta.iter().zip(weights).map(|(t, w)| w * t.abs()).sum::<f64>() * n as f64 * lambda;
    profiled_loss(loss, &e) + pen
}

/// Exhaustive grid over `[-5, 5]^p` (p <= 2) followed by successively finer
/// local grids around the incumbent. Returns the best objective and point.
pub fn grid_minimum(data: &Dataset, loss: &LossSpec, lambda: f64, weights: &[f64]) -> (f64, Vec<f64>) {
    let p = data.p();
    assert!((1..=2).contains(&p), "grid oracle supports one or two predictors");
    let eval = |t: &[f64]| penalized_at(data, loss, lambda, weights, t);

    let mut best = (f64::INFINITY, vec![0.0; p]);
    let scan = |center: &[f64], half: f64, step: f64, best: &mut (f64, Vec<f64>)| {
        let m = (half / step).round() as i64;
        let mut point = vec![0.0; p];
        for a in -m..=m {
            point[0] = center[0] + a as f64 * step;
            if p == 1 {
                let v = eval(&point);
                if v < best.0 {
                    *best = (v, point.clone());
                }
                continue;
            }
            for b in -m..=m {
                point[1] = center[1] + b as f64 * step;
                let v = eval(&point);
                if v < best.0 {
                    *best = (v, point.clone());
                }
            }
        }
    };
    let coarse = if p == 1 { 1e-3 } else { 0.05 };
    scan(&vec![0.0; p], 5.0, coarse, &mut best);
    let mut step = coarse;
    // also include the zero point (and axes) explicitly: penalized minima often sit there
    for j in 0..p {
        let mut axis = best.1.clone();
        axis[j] = 0.0;
        let v = eval(&axis);
        if v < best.0 {
            best = (v, axis);
        }
    }
    while step > 2e-7 {
        let half = 10.0 * step;
        step /= 5.0;
        let center = best.1.clone();
        scan(&center, half, step, &mut best);
        for j in 0..p {
            let mut axis = best.1.clone();
            axis[j] = 0.0;
            let v = eval(&axis);
            if v < best.0 {
                best = (v, axis);
            }
        }
    }
    best
}

/// Exact minimum of a single-level check-type objective (one intercept,
/// optional weighted L1 penalty) by vertex enumeration: the optimum of this
/// linear program sits where `1 + p` constraints `r_i = 0` or `theta_j = 0`
/// are active.
pub fn vertex_minimum(data: &Dataset, loss: &LossSpec, lambda: f64, weights: &[f64]) -> f64 {
    let lv = levels(loss).expect("check-type loss");
    assert_eq!(lv.len(), 1, "single intercept only");
    let (tau, scale) = lv[0];
    let n = data.n();
    let p = data.p();
    let d = 1 + p;
    // constraint rows over (b, theta): residual rows [1, x_i] = y_i, zero rows e_j = 0
    let mut rows: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let mut r = vec![1.0];
            r.extend((0..p).map(|j| data.x()[(i, j)]));
            (r, data.y()[i])
        })
        .collect();
    for j in 0..p {
        let mut r = vec![0.0; d];
        r[1 + j] = 1.0;
        rows.push((r, 0.0));
    }
    let objective = |z: &DVector<f64>| -> f64 {
        let loss: f64 = (0..n)
            .map(|i| {
                let fit = z[0] + (0..p).map(|j| data.x()[(i, j)] * z[1 + j]).sum::<f64>();
                rho(tau, data.y()[i] - fit) * scale
            })
            .sum();
        let pen: f64 = (0..p).map(|j| weights[j] * z[1 + j].abs()).sum::<f64>() * n as f64 * lambda;
        loss + pen
    };
    let mut best = f64::INFINITY;
    let m = rows.len();
    let mut combo: Vec<usize> = (0..d).collect();
    loop {
        let a = DMatrix::from_fn(d, d, |r, c| rows[combo[r]].0[c]);
        let rhs = DVector::from_fn(d, |r, _| rows[combo[r]].1);
        if let Some(z) = a.lu().solve(&rhs) {
            if z.iter().all(|v| v.is_finite()) {
                best = best.min(objective(&z));
            }
        }
        // next combination
        let mut k = d;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if combo[k] < m - d + k {
                combo[k] += 1;
                for t in k + 1..d {
                    combo[t] = combo[t - 1] + 1;
                }
                break;
            }
        }
    }
}
