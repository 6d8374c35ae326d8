//! The four commands. Each returns the text report it also writes to disk.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use votereg::dataprep::{self, ColumnRef, SYNTHETIC_RESPONSE};
use votereg::lincore::parse_loss_list;
use votereg::optweight::{self, ErrorDensity};
use votereg::parallel::Workers;
use votereg::simbench::{self, ErrorDist, Method, MethodSummary, SimDesign};
use votereg::voteselect::{self, Validation};
use votereg::{Dataset, LossSpec, SparseFit};

use crate::config::RunConfig;
use crate::CliError;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn in_file(path: &Path, e: votereg::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn workers(cfg: &RunConfig, tasks: usize) -> Result<Workers, CliError> {
    let count = cfg.workers.resolve(tasks);
    Workers::new(count).map_err(CliError::from)
}

fn num(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "NA".to_string()
    }
}

/// Writes the three standard artifacts into `out`.
fn write_artifacts(out: &Path, json: &impl Serialize, csv: &str, text: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", out.display())))?;
    let mut doc = serde_json::to_string_pretty(json).map_err(|e| CliError::Runtime(e.to_string()))?;
    doc.push('\n');
    for (name, body) in [("results.json", doc.as_str()), ("report.csv", csv), ("report.txt", text)] {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn csv_string(rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for row in rows {
        w.write_record(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV built from UTF-8 strings"))
}

/// Left-aligns the first column and right-aligns the rest.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|v| v.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

#[derive(Serialize)]
struct LabeledFit {
    loss: String,
    coefficients: Vec<f64>,
    intercepts: Vec<f64>,
    support: Vec<String>,
    objective_value: f64,
    converged: bool,
}

impl LabeledFit {
    fn new(loss: String, fit: &SparseFit, data: &Dataset) -> Self {
        Self {
            loss,
            coefficients: fit.coefficients.clone(),
            intercepts: fit.intercepts.clone(),
            support: fit.support.iter().map(|&j| data.column_label(j)).collect(),
            objective_value: fit.objective_value,
            converged: fit.converged,
        }
    }
}

#[derive(Serialize)]
struct Baseline {
    lambda: f64,
    #[serde(flatten)]
    fit: LabeledFit,
}

#[derive(Serialize)]
struct FitFlags {
    empty_selection: bool,
    xi_fallback: bool,
    uniform_weights: bool,
}

#[derive(Serialize)]
struct FitResults {
    n: usize,
    p: usize,
    response: Option<String>,
    predictors: Vec<String>,
    validation: String,
    selection_losses: Vec<String>,
    estimation_losses: Vec<String>,
    lambdas: Vec<f64>,
    preliminary: Vec<LabeledFit>,
    vote_counts: Vec<usize>,
    alpha: usize,
    alpha_scores: Vec<voteselect::AlphaScore>,
    selected_indices: Vec<usize>,
    selected: Vec<String>,
    xi_weights: Vec<f64>,
    weights: Vec<f64>,
    weight_plan: Option<optweight::WeightPlan>,
    refits: Vec<LabeledFit>,
    final_fit: LabeledFit,
    flags: FitFlags,
    baselines: Vec<Baseline>,
}

/// Selects variables by vote on a CSV dataset and refits them.
pub fn fit(cfg: &RunConfig) -> Result<String, CliError> {
    let data_path = cfg.data.as_ref().ok_or_else(|| CliError::Config("fit needs --data".into()))?;
    let response: ColumnRef = cfg
        .response
        .as_deref()
        .ok_or_else(|| CliError::Config("fit needs --response".into()))?
        .parse()
        .map_err(config_err)?;
    let selection = parse_loss_list(&cfg.losses).map_err(config_err)?;
    let estimation = match &cfg.estimate {
        Some(spec) => parse_loss_list(spec).map_err(config_err)?,
        None => selection.clone(),
    };
    let baselines: Vec<LossSpec> = match &cfg.baselines {
        Some(spec) => parse_loss_list(spec).map_err(config_err)?,
        None => Vec::new(),
    };
    cfg.pipeline.validate().map_err(config_err)?;

    let data = dataprep::load_csv(data_path, cfg.has_header, &response).map_err(|e| in_file(data_path, e))?;
    info!("loaded {} observations of {} predictors from {}", data.n(), data.p(), data_path.display());
    let (validation, validation_label) = match &cfg.validation_data {
        Some(path) => {
            let valid = dataprep::load_csv(path, cfg.has_header, &response).map_err(|e| in_file(path, e))?;
            let label = format!("holdout ({} observations)", valid.n());
            (Validation::Holdout(valid), label)
        }
        None => (
            Validation::CrossValidation { folds: cfg.folds, seed: cfg.seed },
            format!("{}-fold cross-validation (seed {})", cfg.folds, cfg.seed),
        ),
    };
    let tasks = selection.len().max(baselines.len()) * (cfg.folds + 1);
    let pool = workers(cfg, tasks)?;
    let result = voteselect::run_pipeline(&data, &selection, &estimation, &validation, &cfg.pipeline, &pool)?;
    let tuned_baselines = if baselines.is_empty() {
        Vec::new()
    } else {
        voteselect::tune_lambda(&data, &baselines, &validation, &cfg.pipeline, &pool)?
    };

    let labels: Vec<String> = (0..data.p()).map(|j| data.column_label(j)).collect();
    let selected: Vec<String> = result.vote.selected.iter().map(|&j| labels[j].clone()).collect();
    let results = FitResults {
        n: data.n(),
        p: data.p(),
        response: data.response_name().map(str::to_string),
        predictors: labels.clone(),
        validation: validation_label.clone(),
        selection_losses: result.selection_losses.clone(),
        estimation_losses: result.estimation_losses.clone(),
        lambdas: result.lambdas.clone(),
        preliminary: result
            .selection_losses
            .iter()
            .zip(&result.preliminary)
            .map(|(l, f)| LabeledFit::new(l.clone(), f, &data))
            .collect(),
        vote_counts: result.vote.vote_counts.clone(),
        alpha: result.vote.alpha,
        alpha_scores: result.alpha_scores.clone(),
        selected_indices: result.vote.selected.clone(),
        selected: selected.clone(),
        xi_weights: result.xi_weights.clone(),
        weights: result.weights.clone(),
        weight_plan: result.weight_plan.clone(),
        refits: result
            .estimation_losses
            .iter()
            .zip(&result.refits)
            .map(|(l, f)| LabeledFit::new(l.clone(), f, &data))
            .collect(),
        final_fit: LabeledFit::new("combined".into(), &result.final_fit, &data),
        flags: FitFlags {
            empty_selection: result.empty_selection,
            xi_fallback: result.xi_fallback,
            uniform_weights: result.uniform_weights,
        },
        baselines: baselines
            .iter()
            .zip(&tuned_baselines)
            .map(|(loss, (lambda, f))| Baseline { lambda: *lambda, fit: LabeledFit::new(loss.label(), f, &data) })
            .collect(),
    };

    let mut header = vec!["predictor".to_string(), "votes".into(), "selected".into(), "coefficient".into()];
    header.extend(baselines.iter().map(LossSpec::label));
    let mut rows = vec![header];
    for (j, label) in labels.iter().enumerate() {
        let mut row = vec![
            label.clone(),
            result.vote.vote_counts[j].to_string(),
            u8::from(result.vote.selected.binary_search(&j).is_ok()).to_string(),
            result.final_fit.coefficients[j].to_string(),
        ];
        row.extend(tuned_baselines.iter().map(|(_, f)| f.coefficients[j].to_string()));
        rows.push(row);
    }
    let csv = csv_string(&rows)?;

    let mut text = String::new();
    let _ = writeln!(text, "observations: {}", data.n());
    let _ = writeln!(text, "predictors: {}", data.p());
    let _ = writeln!(text, "validation: {validation_label}");
    let _ = writeln!(text);
    let mut loss_rows = vec![vec!["selection loss".to_string(), "lambda".into(), "size".into(), "xi".into()]];
    for (k, label) in result.selection_losses.iter().enumerate() {
        loss_rows.push(vec![
            label.clone(),
            num(result.lambdas[k], 6),
            result.preliminary[k].support.len().to_string(),
            num(result.xi_weights[k], 4),
        ]);
    }
    text.push_str(&aligned(&loss_rows));
    let _ = writeln!(text);
    let mut alpha_rows = vec![vec!["alpha".to_string(), "size".into(), "score".into()]];
    for s in &result.alpha_scores {
        alpha_rows.push(vec![s.alpha.to_string(), s.selected.len().to_string(), num(s.score, 6)]);
    }
    text.push_str(&aligned(&alpha_rows));
    let _ = writeln!(text);
    let _ = writeln!(text, "alpha: {}", result.vote.alpha);
    let _ = writeln!(text, "selected: {}", selected.join(","));
    let weights: Vec<String> = result.weights.iter().map(|w| num(*w, 4)).collect();
    let _ = writeln!(text, "weights: {}", weights.join(","));
    let _ = writeln!(text);
    let mut coef_rows = vec![vec!["predictor".to_string(), "votes".into(), "coefficient".into()]];
    for &j in &result.vote.selected {
        coef_rows.push(vec![
            labels[j].clone(),
            result.vote.vote_counts[j].to_string(),
            num(result.final_fit.coefficients[j], 6),
        ]);
    }
    text.push_str(&aligned(&coef_rows));
    if !baselines.is_empty() {
        let _ = writeln!(text);
        let mut base_rows = vec![vec!["baseline".to_string(), "lambda".into(), "size".into()]];
        for (loss, (lambda, f)) in baselines.iter().zip(&tuned_baselines) {
            base_rows.push(vec![loss.label(), num(*lambda, 6), f.support.len().to_string()]);
        }
        text.push_str(&aligned(&base_rows));
    }
    if result.empty_selection {
        warn!("no predictor reached the vote threshold");
    }
    write_artifacts(&cfg.out, &results, &csv, &text)?;
    Ok(text)
}

fn parse_choice<T: Copy>(
    names: &[String],
    all: &[T],
    parse: impl Fn(&str) -> votereg::Result<T>,
) -> Result<Vec<T>, CliError> {
    if names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        return Ok(all.to_vec());
    }
    if names.is_empty() {
        return Err(CliError::Config("empty selection list".into()));
    }
    names.iter().map(|n| parse(n).map_err(config_err)).collect()
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    dist: String,
    mnc: f64,
    mni: f64,
    re: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_ms: Option<f64>,
    replicates: usize,
    failures: usize,
}

#[derive(Serialize)]
struct FailureRow {
    method: String,
    dist: String,
    replicate: usize,
    message: String,
}

#[derive(Serialize)]
struct SimResults {
    n: usize,
    p: usize,
    rho: f64,
    validation_n: usize,
    replicates: usize,
    seed: u64,
    summaries: Vec<SummaryRow>,
    failures: Vec<FailureRow>,
}

/// Runs the simulation study for every requested error distribution.
pub fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let dists = parse_choice(&cfg.simulate.dists, &ErrorDist::ALL, ErrorDist::parse)?;
    let methods = parse_choice(&cfg.simulate.methods, &Method::ALL, Method::parse)?;
    cfg.pipeline.validate().map_err(config_err)?;
    let s = &cfg.simulate;
    let pool = workers(cfg, s.replicates)?;
    let mut summaries: Vec<MethodSummary> = Vec::new();
    let mut failures: Vec<FailureRow> = Vec::new();
    for dist in dists {
        let mut design = SimDesign::standard(s.p, dist, cfg.seed);
        design.n = s.n;
        design.rho = s.rho;
        design.validation_n = s.validation_n;
        design.replicates = s.replicates;
        design.validate().map_err(config_err)?;
        info!("simulating {} replicates with {} errors on {} workers", s.replicates, dist.name(), pool.count());
        let report = simbench::run_study(&design, &methods, &cfg.pipeline, &pool)?;
        for f in &report.failures {
            warn!("{} replicate {} under {} failed: {}", f.method.name(), f.replicate, dist.name(), f.message);
            failures.push(FailureRow {
                method: f.method.name().into(),
                dist: dist.name().into(),
                replicate: f.replicate,
                message: f.message.clone(),
            });
        }
        summaries.extend(report.summaries);
    }
    let results = SimResults {
        n: s.n,
        p: s.p,
        rho: s.rho,
        validation_n: s.validation_n,
        replicates: s.replicates,
        seed: cfg.seed,
        summaries: summaries
            .iter()
            .map(|m| SummaryRow {
                method: m.method.name().into(),
                dist: m.dist.name().into(),
                mnc: m.mnc,
                mni: m.mni,
                re: m.re,
                time_ms: cfg.timing.then_some(m.time_ms),
                replicates: m.replicates,
                failures: m.failures,
            })
            .collect(),
        failures,
    };
    let csv = simbench::report_csv(&summaries, cfg.timing)?;
    let text = simbench::report_table(&summaries, cfg.timing);
    write_artifacts(&cfg.out, &results, &csv, &text)?;
    Ok(text)
}

#[derive(Serialize)]
struct RankedProbe {
    rank: usize,
    probe: String,
    correlation: f64,
}

#[derive(Serialize)]
struct ScreenResults {
    probes: usize,
    samples: usize,
    response: String,
    threshold: f64,
    survivors: usize,
    kept: usize,
    dataset: String,
    ranked: Vec<RankedProbe>,
}

/// Filters and ranks expression probes; writes `screened.csv` for `fit`.
pub fn screen(cfg: &RunConfig) -> Result<String, CliError> {
    let (matrix, response) = match &cfg.screen.synthetic {
        Some(spec) => {
            let response = cfg.response.clone().unwrap_or_else(|| SYNTHETIC_RESPONSE.to_string());
            (dataprep::synthetic_expression(spec).map_err(config_err)?, response)
        }
        None => {
            let path =
                cfg.data.as_ref().ok_or_else(|| CliError::Config("screen needs --data or --synthetic".into()))?;
            let response = cfg.response.clone().ok_or_else(|| CliError::Config("screen needs --response".into()))?;
            let matrix = dataprep::load_expression_csv(path, cfg.screen.orientation).map_err(|e| in_file(path, e))?;
            (matrix, response)
        }
    };
    let filters = cfg.screen.filters();
    let screened = dataprep::screen_probes(&matrix, &response, &filters)?;
    info!(
        "{} of {} probes pass the filters, keeping {}",
        screened.survivors,
        matrix.n_probes() - 1,
        screened.ranked.len()
    );
    std::fs::create_dir_all(&cfg.out)?;
    let dataset_path = cfg.out.join("screened.csv");
    dataprep::save_csv(&dataset_path, &screened.dataset)?;

    let ranked: Vec<RankedProbe> = screened
        .ranked
        .iter()
        .enumerate()
        .map(|(i, (probe, c))| RankedProbe { rank: i + 1, probe: probe.clone(), correlation: *c })
        .collect();
    let mut rows = vec![vec!["rank".to_string(), "probe".into(), "corr".into()]];
    rows.extend(ranked.iter().map(|r| vec![r.rank.to_string(), r.probe.clone(), r.correlation.to_string()]));
    let csv = csv_string(&rows)?;

    let mut text = String::new();
    let _ = writeln!(text, "probes: {}", matrix.n_probes());
    let _ = writeln!(text, "samples: {}", matrix.n_samples());
    let _ = writeln!(text, "response: {response}");
    let _ = writeln!(text, "maximum threshold: {}", num(screened.threshold, 4));
    let _ = writeln!(text, "passing filters: {}", screened.survivors);
    let _ = writeln!(text, "kept: {}", ranked.len());
    let _ = writeln!(text);
    let mut table = vec![vec!["rank".to_string(), "probe".into(), "corr".into()]];
    table.extend(ranked.iter().map(|r| vec![r.rank.to_string(), r.probe.clone(), num(r.correlation, 4)]));
    text.push_str(&aligned(&table));

    let results = ScreenResults {
        probes: matrix.n_probes(),
        samples: matrix.n_samples(),
        response,
        threshold: screened.threshold,
        survivors: screened.survivors,
        kept: ranked.len(),
        dataset: "screened.csv".into(),
        ranked,
    };
    write_artifacts(&cfg.out, &results, &csv, &text)?;
    Ok(text)
}

/// `normal:V`, `normal(V)`, `uniform:A:B` or `uniform(A,B)`.
pub fn parse_density(spec: &str) -> Result<ErrorDensity, CliError> {
    let bad = || CliError::Config(format!("unknown density {spec:?}; use normal:VAR or uniform:LO:HI"));
    let s = spec.trim().to_ascii_lowercase();
    let (name, rest) = match s.find(['(', ':']) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s.as_str(), ""),
    };
    let args: Vec<f64> = if let Some(inner) = rest.strip_prefix('(') {
        inner.strip_suffix(')').ok_or_else(bad)?.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>()
    } else if let Some(inner) = rest.strip_prefix(':') {
        inner.split(':').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>()
    } else {
        Ok(Vec::new())
    }
    .map_err(|_| bad())?;
    let density = match (name.trim(), args.as_slice()) {
        ("normal", []) => ErrorDensity::Normal { variance: 1.0 },
        ("normal", [v]) => ErrorDensity::Normal { variance: *v },
        ("uniform", [lo, hi]) => ErrorDensity::Uniform { lo: *lo, hi: *hi },
        _ => return Err(bad()),
    };
    density.validate().map_err(config_err)?;
    Ok(density)
}

#[derive(Serialize)]
struct DiagnoseRow {
    k: usize,
    value: f64,
    target: Option<f64>,
    relative_error: Option<f64>,
    inverse_residual: f64,
    inverse_deviation: f64,
}

#[derive(Serialize)]
struct DiagnoseResults {
    density: ErrorDensity,
    fisher_information: Option<f64>,
    rows: Vec<DiagnoseRow>,
}

/// Tabulates `r^T H^-1 r` against the Fisher information as `K` grows.
pub fn diagnose(cfg: &RunConfig) -> Result<String, CliError> {
    let density = parse_density(&cfg.diagnose.density)?;
    if cfg.diagnose.ks.is_empty() || cfg.diagnose.ks.contains(&0) {
        return Err(CliError::Config("K values must be positive".into()));
    }
    let found = optweight::fisher_limit_check(&density, &cfg.diagnose.ks)?;
    let info = density.fisher_information();
    let target = info.is_finite().then_some(info);
    let rows: Vec<DiagnoseRow> = found
        .iter()
        .map(|r| DiagnoseRow {
            k: r.k,
            value: r.value,
            target,
            relative_error: target.map(|t| (r.value - t).abs() / t),
            inverse_residual: r.inverse_residual,
            inverse_deviation: r.inverse_deviation,
        })
        .collect();
    let header = ["k", "value", "target", "relative_error", "inverse_residual", "inverse_deviation"]
        .map(str::to_string)
        .to_vec();
    let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or_else(|| "NA".to_string(), f);
    let mut csv_rows = vec![header.clone()];
    let mut table = vec![header];
    for r in &rows {
        csv_rows.push(vec![
            r.k.to_string(),
            r.value.to_string(),
            opt(r.target, &|v| v.to_string()),
            opt(r.relative_error, &|v| v.to_string()),
            r.inverse_residual.to_string(),
            r.inverse_deviation.to_string(),
        ]);
        table.push(vec![
            r.k.to_string(),
            num(r.value, 6),
            opt(r.target, &|v| num(v, 6)),
            opt(r.relative_error, &|v| format!("{v:.3e}")),
            format!("{:.3e}", r.inverse_residual),
            format!("{:.3e}", r.inverse_deviation),
        ]);
    }
    let csv = csv_string(&csv_rows)?;
    let mut text = String::new();
    let _ = writeln!(text, "density: {}", cfg.diagnose.density);
    let _ = writeln!(text, "fisher information: {}", opt(target, &|v| num(v, 6)));
    let _ = writeln!(text);
    text.push_str(&aligned(&table));
    let worst = rows.iter().map(|r| r.inverse_residual).fold(0.0, f64::max);
    let _ = writeln!(text);
    let _ = writeln!(text, "max |H H^-1 - I|: {worst:.3e}");
    let results = DiagnoseResults { density, fisher_information: target, rows };
    write_artifacts(&cfg.out, &results, &csv, &text)?;
    Ok(text)
}
