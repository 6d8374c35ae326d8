//! Run configuration: a JSON document overridden by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use votereg::dataprep::{Orientation, ScreenConfig, SyntheticExpression};
use votereg::voteselect::PipelineConfig;

/// Worker count: a positive integer or `auto` for the detected cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WorkerSpec {
    #[default]
    Auto,
    Count(usize),
}

impl WorkerSpec {
    /// Concrete count; `auto` is capped at `tasks`.
    pub fn resolve(self, tasks: usize) -> usize {
        match self {
            WorkerSpec::Count(n) => n,
            WorkerSpec::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()).min(tasks.max(1)),
        }
    }
}

impl FromStr for WorkerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(WorkerSpec::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(WorkerSpec::Count(n)),
            _ => Err(format!("workers must be a positive integer or \"auto\", got {s:?}")),
        }
    }
}

impl fmt::Display for WorkerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerSpec::Auto => f.write_str("auto"),
            WorkerSpec::Count(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for WorkerSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            WorkerSpec::Auto => s.serialize_str("auto"),
            WorkerSpec::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for WorkerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("workers must be positive")),
            Raw::Count(n) => Ok(WorkerSpec::Count(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub p: usize,
    pub n: usize,
    pub rho: f64,
    pub validation_n: usize,
    pub replicates: usize,
    /// Error distribution names, or `all`.
    pub dists: Vec<String>,
    /// Method names, or `all`.
    pub methods: Vec<String>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            p: 12,
            n: 200,
            rho: 0.5,
            validation_n: 2000,
            replicates: 200,
            dists: vec!["all".into()],
            methods: vec!["all".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenSection {
    pub top_m: usize,
    pub max_quantile: f64,
    pub min_range: f64,
    pub orientation: Orientation,
    /// Screen a generated matrix instead of reading one.
    pub synthetic: Option<SyntheticExpression>,
}

impl Default for ScreenSection {
    fn default() -> Self {
        let f = ScreenConfig::default();
        Self {
            top_m: f.top_m,
            max_quantile: f.max_quantile,
            min_range: f.min_range,
            orientation: Orientation::default(),
            synthetic: None,
        }
    }
}

impl ScreenSection {
    pub fn filters(&self) -> ScreenConfig {
        ScreenConfig { top_m: self.top_m, max_quantile: self.max_quantile, min_range: self.min_range }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    /// `normal:VARIANCE` or `uniform:LO:HI`.
    pub density: String,
    pub ks: Vec<usize>,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self { density: "normal:1".into(), ks: vec![1, 3, 9, 19, 29, 49, 99] }
    }
}

/// Everything a command needs. Defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Response column (name or 0-based index) or response probe id.
    pub response: Option<String>,
    pub has_header: bool,
    /// Independent validation file; cross-validation is used without one.
    pub validation_data: Option<PathBuf>,
    pub out: PathBuf,
    /// Selection losses, e.g. `deciles` or `lad,ls,cqr`.
    pub losses: String,
    /// Estimation losses; the selection losses when absent.
    pub estimate: Option<String>,
    /// Single-loss penalized fits reported next to the vote for comparison.
    pub baselines: Option<String>,
    pub folds: usize,
    pub seed: u64,
    pub workers: WorkerSpec,
    /// Report wall times (makes output machine dependent).
    pub timing: bool,
    pub pipeline: PipelineConfig,
    pub simulate: SimulateSection,
    pub screen: ScreenSection,
    pub diagnose: DiagnoseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            response: None,
            has_header: true,
            validation_data: None,
            out: PathBuf::from("votereg-out"),
            losses: "deciles".into(),
            estimate: None,
            baselines: None,
            folds: 5,
            seed: 2024,
            workers: WorkerSpec::Auto,
            timing: false,
            pipeline: PipelineConfig::default(),
            simulate: SimulateSection::default(),
            screen: ScreenSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}
