//! Exact finishing phase for check-type objectives.
//!
//! These objectives are convex and piecewise linear, so a minimum sits at a
//! vertex where `d = intercepts + coefficients` independent kink conditions
//! hold (a residual at zero or a coefficient at zero). From the
//! coordinate-descent iterate the phase first moves onto a vertex, then
//! follows descending edges with exact line searches through the kinks until
//! every edge is uphill, which certifies optimality. Wide problems run on a
//! working set of coefficients that starts from the nonzero ones and grows by
//! the zero coefficients whose reduced cost exceeds their penalty.

use nalgebra::{DMatrix, DVector};

use super::breakpoint::{weighted_lower_quantile, Knot, KnotSet};
use super::engine::Engine;
use crate::lincore::CheckLevel;

/// Steps between refactorizations of the basis inverse.
const REFACTOR_EVERY: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    /// Residual of observation `obs` at level `level`.
    Resid { level: usize, obs: usize },
    /// Working coefficient `k` (index into the working set).
    Zero { k: usize },
}

/// Outcome of one exact solve.
pub(crate) struct ExactRun {
    pub optimal: bool,
    pub steps: usize,
}

struct Phase<'e, 'a> {
    eng: &'e mut Engine<'a>,
    levels: Vec<CheckLevel>,
    coords: Vec<usize>,
    basis: Vec<Term>,
    inv: DMatrix<f64>,
    basic_resid: Vec<bool>,
    basic_zero: Vec<bool>,
    /// Side a nonbasic term on its kink is treated as lying on (`0` unset,
    /// read as positive). Fixing a side is an infinitesimal shift of that
    /// kink, which resolves degenerate vertices as in the simplex method.
    side_resid: Vec<i8>,
    side_zero: Vec<i8>,
    /// Residuals with `|u|` at most this count as sitting on their kink.
    ztol: f64,
}

impl<'a> Engine<'a> {
    /// Runs the exact phase; `full_limit` is the largest predictor count
    /// solved without a working set.
    pub(crate) fn exact_phase(
        &mut self,
        full_limit: usize,
        max_steps: usize,
        trace: &mut Option<Vec<f64>>,
    ) -> ExactRun {
        let levels = match self.levels() {
            Some(l) => l.to_vec(),
            None => return ExactRun { optimal: false, steps: 0 },
        };
        let p = self.p;
        let in_set: Vec<bool> = if p <= full_limit {
            vec![true; p]
        } else {
            (0..p).map(|j| self.theta[j] != 0.0 || self.pen[j] == 0.0).collect()
        };
        let coords: Vec<usize> = (0..p).filter(|&j| in_set[j]).collect();
        let mut phase = Phase::new(self, levels, coords);
        let built = phase.build_vertex();
        // reaching the vertex is itself a descent move
        if let Some(tr) = trace.as_mut() {
            tr.push(phase.eng.value());
        }
        if !built {
            return ExactRun { optimal: false, steps: 0 };
        }
        let mut steps = 0usize;
        loop {
            let (optimal, used) = phase.descend(max_steps.saturating_sub(steps), trace);
            steps += used;
            if !optimal || phase.coords.len() == p {
                return ExactRun { optimal, steps };
            }
            let violators = phase.outside_violators();
            if violators.is_empty() {
                return ExactRun { optimal: true, steps };
            }
            phase.extend(&violators);
        }
    }
}

impl<'e, 'a> Phase<'e, 'a> {
    fn new(eng: &'e mut Engine<'a>, levels: Vec<CheckLevel>, coords: Vec<usize>) -> Self {
        let scale = 1.0 + eng.e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n = eng.n;
        let m = coords.len();
        let k = levels.len();
        Self {
            eng,
            basic_resid: vec![false; k * n],
            basic_zero: vec![false; m],
            side_resid: vec![0; k * n],
            side_zero: vec![0; m],
            levels,
            coords,
            basis: Vec::new(),
            inv: DMatrix::zeros(0, 0),
            ztol: 1e-11 * scale,
        }
    }

    fn dim(&self) -> usize {
        self.levels.len() + self.coords.len()
    }

    fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Kink offset `u` and the weights on its positive and negative parts.
    fn term_state(&self, term: Term) -> (f64, f64, f64) {
        match term {
            Term::Resid { level, obs } => {
                let lv = &self.levels[level];
                (self.eng.e[obs] - self.eng.beta[level], lv.w_pos, lv.w_neg)
            }
            Term::Zero { k } => {
                let w = self.eng.pen[self.coords[k]];
                (-self.eng.theta[self.coords[k]], w, w)
            }
        }
    }

    fn row(&self, term: Term) -> DVector<f64> {
        let mut a = DVector::zeros(self.dim());
        let kl = self.n_levels();
        match term {
            Term::Resid { level, obs } => {
                a[level] = 1.0;
                for (k, &j) in self.coords.iter().enumerate() {
                    a[kl + k] = self.eng.x[j * self.eng.n + obs];
                }
            }
            Term::Zero { k } => a[kl + k] = 1.0,
        }
        a
    }

    fn set_basic(&mut self, term: Term, on: bool) {
        match term {
            Term::Resid { level, obs } => self.basic_resid[level * self.eng.n + obs] = on,
            Term::Zero { k } => self.basic_zero[k] = on,
        }
    }

    fn zero_term_exists(&self, k: usize) -> bool {
        self.eng.pen[self.coords[k]] > 0.0
    }

    /// `X_W v_theta`; the per-residual slope along `v` is `v_level + dx_i`.
    fn design_times(&self, v: &DVector<f64>) -> Vec<f64> {
        let n = self.eng.n;
        let kl = self.n_levels();
        let mut dx = vec![0.0; n];
        for (k, &j) in self.coords.iter().enumerate() {
            let c = v[kl + k];
            if c != 0.0 {
                for (d, xi) in dx.iter_mut().zip(self.eng.column(j)) {
                    *d += xi * c;
                }
            }
        }
        dx
    }

    /// Moves the iterate by `step * v`.
    fn apply(&mut self, v: &DVector<f64>, step: f64, dx: &[f64]) {
        let kl = self.n_levels();
        for l in 0..kl {
            self.eng.beta[l] += step * v[l];
        }
        for (k, &j) in self.coords.iter().enumerate() {
            self.eng.theta[j] += step * v[kl + k];
        }
        for (ei, d) in self.eng.e.iter_mut().zip(dx) {
            *ei -= step * d;
        }
        // coefficients held at zero by the basis stay exactly zero
        for k in 0..self.coords.len() {
            if self.basic_zero[k] {
                self.pin_zero(k);
            }
        }
    }

    fn pin_zero(&mut self, k: usize) {
        let j = self.coords[k];
        let t = self.eng.theta[j];
        if t != 0.0 {
            let n = self.eng.n;
            for (ei, xi) in self.eng.e.iter_mut().zip(&self.eng.x[j * n..(j + 1) * n]) {
                *ei += xi * t;
            }
            self.eng.theta[j] = 0.0;
        }
    }

    fn nonbasic_terms(&self) -> Vec<Term> {
        let n = self.eng.n;
        let mut terms = Vec::with_capacity(self.n_levels() * n + self.coords.len());
        for level in 0..self.n_levels() {
            terms
                .extend((0..n).filter(|&obs| !self.basic_resid[level * n + obs]).map(|obs| Term::Resid { level, obs }));
        }
        terms.extend(
            (0..self.coords.len())
                .filter(|&k| self.zero_term_exists(k) && !self.basic_zero[k])
                .map(|k| Term::Zero { k }),
        );
        terms
    }

    /// Whether a nonbasic term with offset `u` sits on its kink.
    fn kinked(&self, term: Term, u: f64) -> bool {
        match term {
            Term::Resid { .. } => u.abs() <= self.ztol,
            Term::Zero { .. } => u == 0.0,
        }
    }

    /// Slope of a term along `v` given the precomputed `dx`.
    fn slope(&self, term: Term, v: &DVector<f64>, dx: &[f64]) -> f64 {
        match term {
            Term::Resid { level, obs } => v[level] + dx[obs],
            Term::Zero { k } => v[self.n_levels() + k],
        }
    }

    /// Moves onto a vertex and factors its basis. `false` when the problem
    /// has a direction along which the objective is constant.
    fn build_vertex(&mut self) -> bool {
        let d = self.dim();
        let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(d);
        let accept = |a: DVector<f64>, ortho: &mut Vec<DVector<f64>>| -> bool {
            let norm = a.norm();
            let mut r = a;
            for q in ortho.iter() {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
            let rn = r.norm();
            if rn > 1e-9 * norm {
                ortho.push(r / rn);
                true
            } else {
                false
            }
        };
        for k in 0..self.coords.len() {
            if self.zero_term_exists(k) && self.eng.theta[self.coords[k]] == 0.0 {
                let t = Term::Zero { k };
                if accept(self.row(t), &mut ortho) {
                    self.basis.push(t);
                    self.set_basic(t, true);
                }
            }
        }
        let n = self.eng.n;
        let mut near: Vec<(f64, Term)> = Vec::new();
        for level in 0..self.n_levels() {
            let b = self.eng.beta[level];
            for obs in 0..n {
                let u = (self.eng.e[obs] - b).abs();
                if u <= self.ztol {
                    near.push((u, Term::Resid { level, obs }));
                }
            }
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, t) in near {
            if self.basis.len() == d {
                break;
            }
            if accept(self.row(t), &mut ortho) {
                self.basis.push(t);
                self.set_basic(t, true);
            }
        }
        let mut knots = KnotSet::default();
        while self.basis.len() < d {
            // unit direction with the largest component outside the current rows
            let mut best = (0usize, -1.0f64);
            for c in 0..d {
                let outside = 1.0 - ortho.iter().map(|q| q[c] * q[c]).sum::<f64>();
                if outside > best.1 {
                    best = (c, outside);
                }
            }
            let mut v = DVector::zeros(d);
            v[best.0] = 1.0;
            for q in ortho.iter() {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
            let dx = self.design_times(&v);
            knots.clear();
            let terms = self.nonbasic_terms();
            for &t in &terms {
                let (u, wp, wn) = self.term_state(t);
                knots.push(u, self.slope(t, &v, &dx), wp, wn);
            }
            let Some(step) = knots.minimizer() else {
                return false;
            };
            let mut enter: Option<(Term, f64)> = None;
            for &t in &terms {
                let s = self.slope(t, &v, &dx);
                if s != 0.0 && self.term_state(t).0 / s == step && enter.is_none_or(|(_, bs)| s.abs() > bs) {
                    enter = Some((t, s.abs()));
                }
            }
            let Some((t, _)) = enter else {
                return false;
            };
            self.apply(&v, step, &dx);
            if let Term::Zero { k } = t {
                self.pin_zero(k);
            }
            if !accept(self.row(t), &mut ortho) {
                return false;
            }
            self.basis.push(t);
            self.set_basic(t, true);
        }
        self.refactor()
    }

    /// Adds zero coefficients to the working set, each held at zero by its
    /// own basis row, so the basis inverse extends blockwise.
    fn extend(&mut self, added: &[usize]) {
        let d = self.dim();
        let m = added.len();
        let n = self.eng.n;
        let mut cross = DMatrix::zeros(d, m);
        for (r, &t) in self.basis.iter().enumerate() {
            if let Term::Resid { obs, .. } = t {
                for (c, &j) in added.iter().enumerate() {
                    cross[(r, c)] = self.eng.x[j * n + obs];
                }
            }
        }
        let top = -(&self.inv * cross);
        let mut inv = DMatrix::zeros(d + m, d + m);
        inv.view_mut((0, 0), (d, d)).copy_from(&self.inv);
        inv.view_mut((0, d), (d, m)).copy_from(&top);
        for c in 0..m {
            inv[(d + c, d + c)] = 1.0;
        }
        self.inv = inv;
        let base = self.coords.len();
        self.coords.extend_from_slice(added);
        for c in 0..m {
            self.basic_zero.push(true);
            self.side_zero.push(0);
            self.basis.push(Term::Zero { k: base + c });
        }
    }

    fn refactor(&mut self) -> bool {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        for (r, &t) in self.basis.iter().enumerate() {
            a.set_row(r, &self.row(t).transpose());
        }
        match a.lu().try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => {
                self.inv = inv;
                true
            }
            _ => false,
        }
    }

    /// Side of a nonbasic term with offset `u`: its sign off the kink, the
    /// stored side on it.
    fn side(&self, term: Term, u: f64) -> f64 {
        if !self.kinked(term, u) {
            return u.signum();
        }
        let stored = match term {
            Term::Resid { level, obs } => self.side_resid[level * self.eng.n + obs],
            Term::Zero { k } => self.side_zero[k],
        };
        if stored < 0 {
            -1.0
        } else {
            1.0
        }
    }

    fn set_side(&mut self, term: Term, side: f64) {
        let v = if side < 0.0 { -1 } else { 1 };
        match term {
            Term::Resid { level, obs } => self.side_resid[level * self.eng.n + obs] = v,
            Term::Zero { k } => self.side_zero[k] = v,
        }
    }

    /// Gradient of the nonbasic terms, each on its side, and the matching
    /// per-observation multipliers.
    fn gradient(&self) -> (DVector<f64>, Vec<f64>) {
        let n = self.eng.n;
        let kl = self.n_levels();
        let mut g = DVector::zeros(self.dim());
        let mut q = vec![0.0; n];
        for (level, lv) in self.levels.iter().enumerate() {
            let b = self.eng.beta[level];
            for obs in 0..n {
                if self.basic_resid[level * n + obs] {
                    continue;
                }
                let t = Term::Resid { level, obs };
                let psi = if self.side(t, self.eng.e[obs] - b) > 0.0 { -lv.w_pos } else { lv.w_neg };
                g[level] += psi;
                q[obs] += psi;
            }
        }
        for (k, &j) in self.coords.iter().enumerate() {
            let mut s: f64 = self.eng.column(j).iter().zip(&q).map(|(x, w)| x * w).sum();
            if self.zero_term_exists(k) && !self.basic_zero[k] {
                let t = Term::Zero { k };
                // the offset is -theta
                s -= self.eng.pen[j] * self.side(t, -self.eng.theta[j]);
            }
            g[kl + k] = s;
        }
        (g, q)
    }

    /// Edge descent from the current vertex. Returns whether optimality was
    /// certified and the number of steps taken.
    fn descend(&mut self, budget: usize, trace: &mut Option<Vec<f64>>) -> (bool, usize) {
        let d = self.dim();
        let mut steps = 0usize;
        let mut knots: Vec<Knot> = Vec::new();
        loop {
            let (g, _) = self.gradient();
            let h = self.inv.tr_mul(&g);
            let mut choice: Option<(usize, f64, f64, f64)> = None;
            for b in 0..d {
                let (_, wp, wn) = self.term_state(self.basis[b]);
                let (up, down) = (h[b] + wn, -h[b] + wp);
                let eps = 1e-9 * (1.0 + h[b].abs() + wp + wn);
                let norm = self.inv.column(b).norm();
                for (rate, sign) in [(up, 1.0), (down, -1.0)] {
                    if rate < -eps && choice.is_none_or(|c| rate / norm < c.1) {
                        choice = Some((b, rate / norm, sign, rate));
                    }
                }
            }
            let Some((b, _, sign, rate)) = choice else {
                return (true, steps);
            };
            if steps >= budget {
                return (false, steps);
            }
            let v: DVector<f64> = self.inv.column(b) * sign;
            let dx = self.design_times(&v);
            knots.clear();
            let leaving = self.basis[b];
            // the offset moves by -slope per unit step
            let leaving_side = -self.slope(leaving, &v, &dx);
            let mut crossings: Vec<(Term, f64, f64)> = Vec::new();
            let mut total = 0.0;
            for t in self.nonbasic_terms() {
                let (u, wp, wn) = self.term_state(t);
                let s = self.slope(t, &v, &dx);
                if s == 0.0 {
                    continue;
                }
                let at = if self.kinked(t, u) {
                    // a kinked term is crossed at once when moving off its side
                    if self.side(t, u) * s > 0.0 {
                        0.0
                    } else {
                        continue;
                    }
                } else {
                    u / s
                };
                if at >= 0.0 {
                    let weight = s.abs() * (wp + wn);
                    total += weight;
                    knots.push(Knot { at, weight });
                    crossings.push((t, at, s.abs()));
                }
            }
            if total < -rate {
                return (false, steps);
            }
            let step = weighted_lower_quantile(&mut knots, -rate);
            let mut enter: Option<(Term, f64)> = None;
            for &(t, at, s) in &crossings {
                if at == step && enter.is_none_or(|(_, bs)| s > bs) {
                    enter = Some((t, s));
                }
            }
            let Some((enter, _)) = enter else {
                return (false, steps);
            };
            // terms passed strictly before the step land on their far side
            for &(t, at, _) in &crossings {
                if at < step {
                    let side = self.side(t, self.term_state(t).0);
                    self.set_side(t, -side);
                }
            }
            self.set_side(leaving, leaving_side);
            self.set_basic(leaving, false);
            self.apply(&v, step, &dx);
            if let Term::Zero { k } = enter {
                self.pin_zero(k);
            }
            self.set_basic(enter, true);
            self.basis[b] = enter;
            steps += 1;
            if steps.is_multiple_of(REFACTOR_EVERY) {
                if !self.refactor() {
                    return (false, steps);
                }
            } else {
                let col = self.inv.column(b).clone_owned();
                let r = (self.row(enter).transpose() * &self.inv).transpose();
                let pivot = r[b];
                if pivot.abs() < 1e-12 {
                    if !self.refactor() {
                        return (false, steps);
                    }
                } else {
                    for c in 0..d {
                        let f = if c == b { 1.0 / pivot - 1.0 } else { -r[c] / pivot };
                        if f != 0.0 {
                            self.inv.column_mut(c).axpy(f, &col, 1.0);
                        }
                    }
                }
            }
            if trace.is_some() {
                let value = self.eng.value();
                if let Some(tr) = trace.as_mut() {
                    tr.push(value);
                }
            }
        }
    }

    /// Zero coefficients outside the working set whose reduced cost leaves
    /// the penalty band, given the optimal vertex of the working problem.
    fn outside_violators(&self) -> Vec<usize> {
        let (g, mut mult) = self.gradient();
        let h = self.inv.tr_mul(&g);
        for (r, &t) in self.basis.iter().enumerate() {
            if let Term::Resid { obs, .. } = t {
                mult[obs] -= h[r];
            }
        }
        let mut inside = vec![false; self.eng.p];
        for &j in &self.coords {
            inside[j] = true;
        }
        let mut out = Vec::new();
        for j in (0..self.eng.p).filter(|&j| !inside[j]) {
            let col = self.eng.column(j);
            let (mut r, mut mag) = (0.0, 0.0);
            for (x, m) in col.iter().zip(&mult) {
                r += x * m;
                mag += (x * m).abs();
            }
            let slack = self.eng.pen[j] + 1e-9 * (1.0 + mag);
            if r.abs() > slack {
                out.push(j);
            }
        }
        out
    }
}
