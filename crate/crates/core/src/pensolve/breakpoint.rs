//! Exact minimization of one-dimensional piecewise-linear convex functions
//! `t -> sum_m w_pos (u_m - s_m t)_+ + w_neg (s_m t - u_m)_+`.
//!
//! The minimizer is a weighted lower quantile of the breakpoints `u_m / s_m`,
//! found by expected-linear-time selection rather than a full sort.

/// A breakpoint with the slope increase it contributes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Knot {
    pub at: f64,
    pub weight: f64,
}

/// Accumulates the terms of a univariate piecewise-linear objective.
#[derive(Debug, Default)]
pub(crate) struct KnotSet {
    knots: Vec<Knot>,
    target: f64,
}

impl KnotSet {
    pub fn clear(&mut self) {
        self.knots.clear();
        self.target = 0.0;
    }

    /// Adds `w_pos (u - s t)_+ + w_neg (s t - u)_+`.
    #[inline]
    pub fn push(&mut self, u: f64, s: f64, w_pos: f64, w_neg: f64) {
        if s > 0.0 {
            self.target += s * w_pos;
            self.knots.push(Knot { at: u / s, weight: s * (w_pos + w_neg) });
        } else if s < 0.0 {
            self.target -= s * w_neg;
            self.knots.push(Knot { at: u / s, weight: -s * (w_pos + w_neg) });
        }
    }

    /// Adds `w |t - center|`.
    #[inline]
    pub fn push_abs(&mut self, center: f64, w: f64) {
        if w > 0.0 {
            self.target += w;
            self.knots.push(Knot { at: center, weight: 2.0 * w });
        }
    }

    #[cfg(test)]
    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Whether `t` is already a minimizer: the left derivative is nonpositive
    /// and the right derivative nonnegative, up to rounding.
    pub fn is_minimizer(&self, t: f64) -> bool {
        let (mut below, mut at, mut total) = (0.0, 0.0, 0.0);
        for k in &self.knots {
            total += k.weight;
            if k.at < t {
                below += k.weight;
            } else if k.at == t {
                at += k.weight;
            }
        }
        let tol = 1e-12 * total;
        below - self.target <= tol && below + at - self.target >= -tol
    }

    /// Leftmost minimizer of the accumulated objective; `None` when it is constant.
    pub fn minimizer(&mut self) -> Option<f64> {
        if self.knots.is_empty() {
            return None;
        }
        Some(weighted_lower_quantile(&mut self.knots, self.target))
    }
}

/// Smallest knot position at which the cumulative weight reaches `target`.
pub(crate) fn weighted_lower_quantile(knots: &mut [Knot], mut target: f64) -> f64 {
    let mut lo = 0usize;
    let mut hi = knots.len();
    loop {
        let slice = &mut knots[lo..hi];
        if slice.len() <= 24 {
            slice.sort_unstable_by(|a, b| a.at.total_cmp(&b.at));
            let mut acc = 0.0;
            for k in slice.iter() {
                acc += k.weight;
                if acc >= target {
                    return k.at;
                }
            }
            return slice[slice.len() - 1].at;
        }
        let pivot = median_of_three(slice[0].at, slice[slice.len() / 2].at, slice[slice.len() - 1].at);
        let (lt, gt) = partition3(slice, pivot);
        let w_lt: f64 = slice[..lt].iter().map(|k| k.weight).sum();
        if w_lt >= target {
            hi = lo + lt;
            continue;
        }
        let w_eq: f64 = slice[lt..gt].iter().map(|k| k.weight).sum();
        if w_lt + w_eq >= target || gt == slice.len() {
            return pivot;
        }
        target -= w_lt + w_eq;
        lo += gt;
    }
}

fn median_of_three(a: f64, b: f64, c: f64) -> f64 {
    if (a <= b) == (b <= c) {
        b
    } else if (b <= a) == (a <= c) {
        a
    } else {
        c
    }
}

/// Dutch-flag partition: `[0, lt)` below pivot, `[lt, gt)` equal, `[gt, len)` above.
fn partition3(slice: &mut [Knot], pivot: f64) -> (usize, usize) {
    let mut lt = 0;
    let mut i = 0;
    let mut gt = slice.len();
    while i < gt {
        let v = slice[i].at;
        if v < pivot {
            slice.swap(lt, i);
            lt += 1;
            i += 1;
        } else if v > pivot {
            gt -= 1;
            slice.swap(i, gt);
        } else {
            i += 1;
        }
    }
    (lt, gt)
}
