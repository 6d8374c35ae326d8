//! Command-line driver: `votereg fit | simulate | screen | diagnose`.
//!
//! Every command writes `results.json`, `report.csv` and `report.txt` into
//! the output directory and prints the text report on stdout. Diagnostics go
//! to stderr. Exit status is 0 on success, 1 on a runtime failure (unreadable
//! data, solver error) and 2 on a configuration error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, WorkerSpec};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or option values.
    Config(String),
    /// Failure while reading data or computing.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<votereg::Error> for CliError {
    fn from(e: votereg::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "votereg", version, about = "Variable selection by vote across penalized losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select variables on a dataset and estimate their coefficients.
    Fit(FitArgs),
    /// Run the simulation study.
    Simulate(SimulateArgs),
    /// Filter and rank expression probes into a regression dataset.
    Screen(ScreenArgs),
    /// Check the optimal-weight kernel against a known error density.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file; flags take precedence over its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads: a positive integer or "auto".
    #[arg(long, value_name = "N|auto")]
    pub workers: Option<WorkerSpec>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Numeric CSV with one observation per row.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Response column: header name or 0-based index.
    #[arg(long, value_name = "NAME")]
    pub response: Option<String>,
    /// The data file has no header row.
    #[arg(long)]
    pub no_header: bool,
    /// Independent validation CSV in the same layout; cross-validation otherwise.
    #[arg(long, value_name = "PATH")]
    pub validation: Option<PathBuf>,
    /// Selection losses, e.g. "deciles" or "q@0.25,q@0.5,q@0.75".
    #[arg(long, value_name = "SPEC")]
    pub losses: Option<String>,
    /// Estimation losses; defaults to the selection losses.
    #[arg(long, value_name = "SPEC")]
    pub estimate: Option<String>,
    /// Single-loss penalized fits to report alongside, e.g. "lad,ls,cqr".
    #[arg(long, value_name = "SPEC")]
    pub baselines: Option<String>,
    /// Cross-validation folds.
    #[arg(long, value_name = "V")]
    pub folds: Option<usize>,
    /// Lambda grid size.
    #[arg(long, value_name = "N")]
    pub grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "N")]
    pub replicates: Option<usize>,
    /// Number of predictors.
    #[arg(long, value_name = "N")]
    pub p: Option<usize>,
    /// Comma-separated error distributions, or "all".
    #[arg(long, value_name = "LIST")]
    pub dists: Option<String>,
    /// Comma-separated methods, or "all".
    #[arg(long, value_name = "LIST")]
    pub methods: Option<String>,
    /// Lambda grid size.
    #[arg(long, value_name = "N")]
    pub grid: Option<usize>,
    /// Report median wall time per replicate (output then varies between runs).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Expression CSV: identifiers in the first column, a header row.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Response probe id.
    #[arg(long, value_name = "NAME")]
    pub response: Option<String>,
    /// The file lists samples as rows instead of probes.
    #[arg(long)]
    pub samples_as_rows: bool,
    /// Screen a generated stand-in matrix instead of a file.
    #[arg(long)]
    pub synthetic: bool,
    /// Number of probes kept.
    #[arg(long, value_name = "N")]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Error density: "normal:VAR", "normal(VAR)", "uniform:LO:HI" or "uniform(LO,HI)".
    #[arg(long, value_name = "SPEC")]
    pub density: Option<String>,
    /// Comma-separated numbers of quantile levels.
    #[arg(long, value_name = "LIST")]
    pub ks: Option<String>,
}

/// Loads the config file named by the flags, if any.
fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

/// Merges flags over the config file and runs the command.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Fit(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.data.is_some() {
                cfg.data = a.data;
            }
            if a.response.is_some() {
                cfg.response = a.response;
            }
            if a.no_header {
                cfg.has_header = false;
            }
            if a.validation.is_some() {
                cfg.validation_data = a.validation;
            }
            if let Some(l) = a.losses {
                cfg.losses = l;
            }
            if a.estimate.is_some() {
                cfg.estimate = a.estimate;
            }
            if a.baselines.is_some() {
                cfg.baselines = a.baselines;
            }
            if let Some(v) = a.folds {
                cfg.folds = v;
            }
            if let Some(g) = a.grid {
                cfg.pipeline.grid_size = g;
            }
            commands::fit(&cfg)
        }
        Command::Simulate(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(r) = a.replicates {
                cfg.simulate.replicates = r;
            }
            if let Some(p) = a.p {
                cfg.simulate.p = p;
            }
            if let Some(d) = a.dists {
                cfg.simulate.dists = split_list(&d);
            }
            if let Some(m) = a.methods {
                cfg.simulate.methods = split_list(&m);
            }
            if let Some(g) = a.grid {
                cfg.pipeline.grid_size = g;
            }
            if a.timing {
                cfg.timing = true;
            }
            commands::simulate(&cfg)
        }
        Command::Screen(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.data.is_some() {
                cfg.data = a.data;
            }
            if a.response.is_some() {
                cfg.response = a.response;
            }
            if a.samples_as_rows {
                cfg.screen.orientation = votereg::dataprep::Orientation::SamplesAsRows;
            }
            if a.synthetic && cfg.screen.synthetic.is_none() {
                cfg.screen.synthetic = Some(Default::default());
            }
            if let Some(t) = a.top {
                cfg.screen.top_m = t;
            }
            commands::screen(&cfg)
        }
        Command::Diagnose(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(d) = a.density {
                cfg.diagnose.density = d;
            }
            if let Some(k) = a.ks {
                cfg.diagnose.ks = split_list(&k)
                    .iter()
                    .map(|s| s.parse::<usize>().map_err(|_| CliError::Config(format!("bad K value {s:?}"))))
                    .collect::<Result<_, _>>()?;
            }
            commands::diagnose(&cfg)
        }
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

/// Parses `args` (program name first), runs, prints, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
