//! Monte Carlo benchmark of the vote pipeline against single-loss SCAD fits.
//!
//! Each replicate draws a training sample and an independent validation
//! sample from `y = X theta + e` with AR(1)-correlated Gaussian predictors,
//! fits every method, and records how many true and false predictors were
//! selected along with the squared estimation error of the method and of its
//! oracle version (unpenalized fit on the true support).

use std::fmt::{self, Write as _};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, Normal, StandardNormal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::lincore::{decile_levels, Dataset, LossSpec, SparseFit};
use crate::optweight;
use crate::parallel::Workers;
use crate::pensolve::{self, SolverConfig};
use crate::voteselect::{self, PipelineConfig, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorDist {
    /// Student t with 2 degrees of freedom.
    T2,
    /// Normal with mean 0 and variance 3.
    Normal3,
    /// `0.5 N(0, 6) + 0.5 N(0, 6 * 0.5^6)`, variances.
    ScaleMixNormal,
    /// `0.5 N(-2, 1) + 0.5 N(2, 1)`.
    LocMixNormal,
    /// Gamma with shape 1 and scale 1.
    Gamma,
    /// Laplace with mean 0 and variance 2.
    DoubleExp,
    /// Beta(1, 3).
    Beta,
    /// Uniform on (-3, 3).
    Uniform,
}

impl ErrorDist {
    pub const ALL: [ErrorDist; 8] = [
        ErrorDist::T2,
        ErrorDist::Normal3,
        ErrorDist::ScaleMixNormal,
        ErrorDist::LocMixNormal,
        ErrorDist::Gamma,
        ErrorDist::DoubleExp,
        ErrorDist::Beta,
        ErrorDist::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::T2 => "T2",
            ErrorDist::Normal3 => "N(0,3)",
            ErrorDist::ScaleMixNormal => "SMN",
            ErrorDist::LocMixNormal => "LMN",
            ErrorDist::Gamma => "Gamma(1,1)",
            ErrorDist::DoubleExp => "DE",
            ErrorDist::Beta => "Beta(1,3)",
            ErrorDist::Uniform => "U(-3,3)",
        }
    }

    /// Accepts the display name or a short alias, case-insensitively.
    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let found = ErrorDist::ALL.into_iter().find(|d| {
            d.name().to_ascii_lowercase() == key
                || match d {
                    ErrorDist::T2 => key == "t",
                    ErrorDist::Normal3 => key == "normal" || key == "n3",
                    ErrorDist::ScaleMixNormal => key == "scale-mix",
                    ErrorDist::LocMixNormal => key == "loc-mix",
                    ErrorDist::Gamma => key == "gamma",
                    ErrorDist::DoubleExp => key == "laplace" || key == "double-exp",
                    ErrorDist::Beta => key == "beta",
                    ErrorDist::Uniform => key == "uniform" || key == "u",
                }
        });
        found.ok_or_else(|| Error::Input(format!("unknown error distribution '{s}'")))
    }

    fn index(self) -> u64 {
        ErrorDist::ALL.iter().position(|d| *d == self).expect("listed") as u64
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ErrorDist::T2 => StudentT::new(2.0).expect("valid").sample(rng),
            ErrorDist::Normal3 => 3f64.sqrt() * rng.sample::<f64, _>(StandardNormal),
            ErrorDist::ScaleMixNormal => {
                let var = if rng.random_bool(0.5) { 6.0 } else { 6.0 * 0.5f64.powi(6) };
                var.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
            ErrorDist::LocMixNormal => {
                let mean = if rng.random_bool(0.5) { -2.0 } else { 2.0 };
                Normal::new(mean, 1.0).expect("valid").sample(rng)
            }
            ErrorDist::Gamma => Gamma::new(1.0, 1.0).expect("valid").sample(rng),
            ErrorDist::DoubleExp => {
                let e: f64 = rng.sample(Exp1);
                if rng.random_bool(0.5) {
                    e
                } else {
                    -e
                }
            }
            ErrorDist::Beta => Beta::new(1.0, 3.0).expect("valid").sample(rng),
            ErrorDist::Uniform => Uniform::new(-3.0, 3.0).expect("valid").sample(rng),
        }
    }
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A nonzero entry of the true coefficient vector (0-based index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub signals: Vec<Signal>,
    pub error_dist: ErrorDist,
    pub replicates: usize,
    pub validation_n: usize,
    pub seed: u64,
}

impl SimDesign {
    /// `n = 200`, 200 replicates, validation size 2000, AR correlation 0.5 and
    /// coefficients 3.0, 1.5, 2.0 on the first, second and fifth predictors.
    pub fn standard(p: usize, error_dist: ErrorDist, seed: u64) -> Self {
        Self {
            n: 200,
            p,
            rho: 0.5,
            signals: vec![
                Signal { index: 0, value: 3.0 },
                Signal { index: 1, value: 1.5 },
                Signal { index: 4, value: 2.0 },
            ],
            error_dist,
            replicates: 200,
            validation_n: 2000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 || self.validation_n < 10 {
            return input("sample sizes must be at least 10");
        }
        if self.p == 0 {
            return input("design needs at least one predictor");
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return input(format!("AR correlation must lie in (-1, 1), got {}", self.rho));
        }
        if let Some(s) = self.signals.iter().find(|s| s.index >= self.p) {
            return input(format!("signal index {} beyond {} predictors", s.index, self.p));
        }
        if self.replicates == 0 {
            return input("need at least one replicate");
        }
        Ok(())
    }

    pub fn true_coefficients(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.p];
        for s in &self.signals {
            theta[s.index] = s.value;
        }
        theta
    }

    pub fn true_support(&self) -> Vec<usize> {
        crate::lincore::support_of(&self.true_coefficients())
    }
}

/// Rows i.i.d. `N(0, Sigma)` with `Sigma_ij = rho^|i-j|`, built column by
/// column as `X_j = rho X_{j-1} + sqrt(1 - rho^2) Z_j`.
pub fn gen_design_with<R: Rng + ?Sized>(n: usize, p: usize, rho: f64, rng: &mut R) -> DMatrix<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = prev;
        for j in 1..p {
            let z: f64 = rng.sample(StandardNormal);
            prev = rho * prev + innov * z;
            x[(i, j)] = prev;
        }
    }
    x
}

pub fn gen_design(n: usize, p: usize, rho: f64, seed: u64) -> Result<DMatrix<f64>> {
    if p == 0 || !(rho > -1.0 && rho < 1.0) {
        return input("design needs p >= 1 and rho in (-1, 1)");
    }
    Ok(gen_design_with(n, p, rho, &mut ChaCha8Rng::seed_from_u64(seed)))
}

pub fn gen_errors_with<R: Rng + ?Sized>(dist: ErrorDist, n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| dist.sample(rng))
}

pub fn gen_errors(dist: ErrorDist, n: usize, seed: u64) -> DVector<f64> {
    gen_errors_with(dist, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one replicate of one design.
pub fn replicate_rng(design: &SimDesign, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(design.seed ^ mix64(design.error_dist.index())));
    rng.set_stream(replicate as u64);
    rng
}

/// Training and validation samples of one replicate.
pub fn replicate_data(design: &SimDesign, replicate: usize) -> Result<(Dataset, Dataset)> {
    let mut rng = replicate_rng(design, replicate);
    let theta = DVector::from_vec(design.true_coefficients());
    let mut draw = |n: usize| -> Result<Dataset> {
        let x = gen_design_with(n, design.p, design.rho, &mut rng);
        let e = gen_errors_with(design.error_dist, n, &mut rng);
        Dataset::new(&x * &theta + e, x, None)
    };
    let train = draw(design.n)?;
    let valid = draw(design.validation_n)?;
    Ok((train, valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Vote over nine check losses, weighted combination of nine quantile refits.
    WqrVote,
    /// SCAD-penalized least absolute deviation.
    Ladr,
    /// SCAD-penalized least squares.
    Lsr,
    /// SCAD-penalized composite quantile regression over the deciles.
    Cqr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::WqrVote, Method::Ladr, Method::Lsr, Method::Cqr];

    pub fn name(self) -> &'static str {
        match self {
            Method::WqrVote => "WQR-vote",
            Method::Ladr => "LADR",
            Method::Lsr => "LSR",
            Method::Cqr => "CQR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key || (key == "vote" && *m == Method::WqrVote))
            .ok_or_else(|| Error::Input(format!("unknown method '{s}'")))
    }

    /// Loss of a single-loss baseline.
    pub fn baseline_loss(self) -> Option<LossSpec> {
        match self {
            Method::WqrVote => None,
            Method::Ladr => Some(LossSpec::Absolute),
            Method::Lsr => Some(LossSpec::Squared),
            Method::Cqr => Some(LossSpec::CompositeQuantile { taus: decile_levels() }),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn decile_losses() -> Vec<LossSpec> {
    decile_levels().into_iter().map(|tau| LossSpec::QuantileCheck { tau }).collect()
}

/// SCAD fit of a single-loss baseline with `lambda` tuned on `validation`.
pub fn run_baselines(
    data: &Dataset,
    validation: &Dataset,
    which: Method,
    config: &PipelineConfig,
) -> Result<SparseFit> {
    let loss = which.baseline_loss().ok_or_else(|| Error::Input(format!("{which} is not a single-loss baseline")))?;
    let tuned = voteselect::tune_lambda(
        data,
        std::slice::from_ref(&loss),
        &Validation::Holdout(validation.clone()),
        config,
        &Workers::serial(),
    )?;
    Ok(tuned.into_iter().next().expect("one loss").1)
}

/// Unpenalized fit on the true support.
pub fn oracle_fit(data: &Dataset, loss: &LossSpec, true_support: &[usize], solver: &SolverConfig) -> Result<SparseFit> {
    pensolve::fit_restricted(data, loss, true_support, solver)
}

/// Oracle version of a method: its estimation step on the true support.
fn method_oracle(data: &Dataset, method: Method, support: &[usize], solver: &SolverConfig) -> Result<Vec<f64>> {
    match method.baseline_loss() {
        Some(loss) => Ok(oracle_fit(data, &loss, support, solver)?.coefficients),
        None => {
            let losses = decile_losses();
            let refits = losses.iter().map(|l| oracle_fit(data, l, support, solver)).collect::<Result<Vec<_>>>()?;
            let plan = optweight::weight_plan(data, &refits, &decile_levels());
            let k = refits.len();
            let weights = match plan {
                Ok(p) => p.w_star,
                Err(_) => vec![1.0 / k as f64; k],
            };
            Ok(optweight::combine(&refits, &weights, support)?.coefficients)
        }
    }
}

fn method_fit(data: &Dataset, valid: &Dataset, method: Method, config: &PipelineConfig) -> Result<Vec<f64>> {
    match method {
        Method::WqrVote => {
            let losses = decile_losses();
            let res = voteselect::run_pipeline(
                data,
                &losses,
                &losses,
                &Validation::Holdout(valid.clone()),
                config,
                &Workers::serial(),
            )?;
            Ok(res.final_fit.coefficients)
        }
        _ => Ok(run_baselines(data, valid, method, config)?.coefficients),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    /// True predictors selected.
    pub correct: usize,
    /// Zero predictors selected.
    pub incorrect: usize,
    pub squared_error: f64,
    pub oracle_squared_error: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub replicate: usize,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub dist: ErrorDist,
    pub mnc: f64,
    pub mni: f64,
    /// Mean oracle squared error over the vote method's mean squared error.
    pub re: f64,
    /// Median wall time per replicate.
    pub time_ms: f64,
    /// Successful replicates.
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub design: SimDesign,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<Failure>,
}

/// Runs one replicate of every method; failures are returned, not raised.
pub fn run_replicate(
    design: &SimDesign,
    replicate: usize,
    methods: &[Method],
    config: &PipelineConfig,
) -> (Vec<ReplicateRecord>, Vec<Failure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let (train, valid) = match replicate_data(design, replicate) {
        Ok(d) => d,
        Err(e) => {
            for &method in methods {
                failures.push(Failure { replicate, method, message: e.to_string() });
            }
            return (records, failures);
        }
    };
    let truth = design.true_coefficients();
    let support = design.true_support();
    for &method in methods {
        let start = Instant::now();
        let outcome = method_fit(&train, &valid, method, config).and_then(|est| {
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            let oracle = method_oracle(&train, method, &support, &config.solver)?;
            Ok((est, oracle, elapsed_ms))
        });
        match outcome {
            Ok((est, oracle, elapsed_ms)) => {
                let selected = crate::lincore::support_of(&est);
                let correct = selected.iter().filter(|j| support.binary_search(j).is_ok()).count();
                records.push(ReplicateRecord {
                    replicate,
                    method,
                    correct,
                    incorrect: selected.len() - correct,
                    squared_error: squared_distance(&est, &truth),
                    oracle_squared_error: squared_distance(&oracle, &truth),
                    elapsed_ms,
                });
            }
            Err(e) => failures.push(Failure { replicate, method, message: e.to_string() }),
        }
    }
    (records, failures)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// All replicates of `design`, fanned out over `workers`, each replicate
/// single-threaded. Records come back in replicate order.
pub fn run_study(
    design: &SimDesign,
    methods: &[Method],
    config: &PipelineConfig,
    workers: &Workers,
) -> Result<SimReport> {
    design.validate()?;
    config.validate()?;
    if methods.is_empty() {
        return input("no methods to run");
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let outcomes = workers.map((0..design.replicates).collect(), |r| run_replicate(design, r, &methods, config));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rec, fail) in outcomes {
        records.extend(rec);
        failures.extend(fail);
    }
    let summaries = summarize(design.error_dist, &methods, &records, &failures);
    Ok(SimReport { design: design.clone(), summaries, records, failures })
}

pub fn summarize(
    dist: ErrorDist,
    methods: &[Method],
    records: &[ReplicateRecord],
    failures: &[Failure],
) -> Vec<MethodSummary> {
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let vote_mse =
        mean(&records.iter().filter(|r| r.method == Method::WqrVote).map(|r| r.squared_error).collect::<Vec<_>>());
    methods
        .iter()
        .map(|&method| {
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
            let pick = |f: fn(&ReplicateRecord) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            MethodSummary {
                method,
                dist,
                mnc: mean(&pick(|r| r.correct as f64)),
                mni: mean(&pick(|r| r.incorrect as f64)),
                re: mean(&pick(|r| r.oracle_squared_error)) / vote_mse,
                time_ms: median(&mut pick(|r| r.elapsed_ms)),
                replicates: rows.len(),
                failures: failures.iter().filter(|f| f.method == method).count(),
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 7] = ["method", "dist", "mnc", "mni", "re", "time_ms", "replicates"];

fn fmt_num(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "NA".to_string()
    }
}

/// One CSV row per method and distribution; `time_ms` is `NA` unless
/// `timing` is set, which keeps the file reproducible byte for byte.
pub fn report_csv(summaries: &[MethodSummary], timing: bool) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for s in summaries {
        w.write_record([
            s.method.name().to_string(),
            s.dist.name().to_string(),
            fmt_num(s.mnc, 4),
            fmt_num(s.mni, 4),
            fmt_num(s.re, 4),
            if timing { fmt_num(s.time_ms, 1) } else { "NA".to_string() },
            s.replicates.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ASCII output"))
}

/// Aligned plain-text table with one row per method and distribution.
pub fn report_table(summaries: &[MethodSummary], timing: bool) -> String {
    let mut rows: Vec<[String; 7]> = vec![CSV_HEADER.map(str::to_string)];
    for s in summaries {
        rows.push([
            s.method.name().to_string(),
            s.dist.name().to_string(),
            fmt_num(s.mnc, 2),
            fmt_num(s.mni, 2),
            fmt_num(s.re, 2),
            if timing { fmt_num(s.time_ms, 1) } else { "NA".to_string() },
            s.replicates.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
