//! Tabular ingestion and expression-probe screening.
//!
//! * [`load_csv`] / [`write_csv`] move a [`Dataset`] through a numeric CSV
//!   file (rows are observations).
//! * [`ExpressionMatrix`] holds a wide probes x samples matrix;
//!   [`screen_probes`] filters low-expression and low-variability probes and
//!   keeps the ones most correlated with a response probe.
//! * [`synthetic_expression`] generates a reproducible stand-in matrix with
//!   a known set of driver probes.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::lincore::Dataset;
use crate::optweight::sample_quantile;

/// A column addressed by header name or 0-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    /// All-digit strings are positions, anything else is a name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "{i}"),
            ColumnRef::Name(s) => f.write_str(s),
        }
    }
}

/// Reads a numeric CSV file; see [`read_csv`].
pub fn load_csv(path: impl AsRef<Path>, has_header: bool, response: &ColumnRef) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, has_header, response)
}

/// Parses a rectangular numeric CSV. The response column is extracted and
/// the remaining columns become predictors, keeping their header names.
/// Parse errors report 1-based file row and column positions (the header,
/// when present, is row 1).
pub fn read_csv<R: Read>(reader: R, has_header: bool, response: &ColumnRef) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header: Option<Vec<String>> = if has_header {
        match records.next() {
            Some(rec) => Some(rec?.iter().map(|s| s.trim().to_string()).collect()),
            None => return input("CSV file is empty"),
        }
    } else {
        None
    };
    let offset = usize::from(has_header);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = header.as_ref().map(Vec::len);
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        let row = r + 1 + offset;
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row,
                column: rec.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let values = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let cell = cell.trim();
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("not a finite number: {cell:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    let width = width.unwrap_or(0);
    let target = match response {
        ColumnRef::Index(i) if *i < width => *i,
        ColumnRef::Index(i) => return input(format!("response column {i} out of range for {width} columns")),
        ColumnRef::Name(name) => match &header {
            Some(h) => h
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Input(format!("response column {name:?} not in header")))?,
            None => return input(format!("response column {name:?} given by name but the file has no header")),
        },
    };
    if rows.is_empty() {
        return input("CSV file has no data rows");
    }
    let n = rows.len();
    let p = width - 1;
    let y = DVector::from_iterator(n, rows.iter().map(|r| r[target]));
    let predictors: Vec<usize> = (0..width).filter(|&c| c != target).collect();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][predictors[j]]);
    let names = header.as_ref().map(|h| predictors.iter().map(|&c| h[c].clone()).collect());
    let response_name = header.map(|h| h[target].clone());
    Ok(Dataset::new(y, x, names)?.with_response_name(response_name))
}

/// Writes the response first, then the predictors, with a header row.
/// Values use the shortest representation that reads back exactly.
pub fn write_csv<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec![data.response_name().unwrap_or("y").to_string()];
    header.extend((0..data.p()).map(|j| match data.column_names() {
        Some(names) => names[j].clone(),
        None => format!("x{}", j + 1),
    }));
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y()[i].to_string()];
        rec.extend((0..data.p()).map(|j| data.x()[(i, j)].to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// [`write_csv`] to a file path.
pub fn save_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    write_csv(std::fs::File::create(path)?, data)
}

/// How probes and samples are laid out in an expression file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One probe per row, one sample per column (series-matrix layout).
    #[default]
    ProbesAsRows,
    SamplesAsRows,
}

/// Expression values with probes as rows and samples as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    values: DMatrix<f64>,
    probe_ids: Vec<String>,
    sample_ids: Vec<String>,
}

impl ExpressionMatrix {
    pub fn new(values: DMatrix<f64>, probe_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        if values.nrows() != probe_ids.len() || values.ncols() != sample_ids.len() {
            return Err(Error::Dimension(format!(
                "{}x{} values for {} probes and {} samples",
                values.nrows(),
                values.ncols(),
                probe_ids.len(),
                sample_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = probe_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return input(format!("duplicate probe id {dup:?}"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return input("expression matrix contains non-finite values");
        }
        Ok(Self { values, probe_ids, sample_ids })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn probe_ids(&self) -> &[String] {
        &self.probe_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_probes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn probe_index(&self, id: &str) -> Option<usize> {
        self.probe_ids.iter().position(|p| p == id)
    }

    /// Same matrix with samples reordered by `order`.
    pub fn permute_samples(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_samples() || order.iter().any(|&c| c >= self.n_samples()) {
            return input("sample permutation does not match the sample count");
        }
        let values = self.values.select_columns(order);
        let sample_ids = order.iter().map(|&c| self.sample_ids[c].clone()).collect();
        Self::new(values, self.probe_ids.clone(), sample_ids)
    }
}

/// Reads an expression file with a header row and identifiers in the first
/// column. With [`Orientation::ProbesAsRows`] the header names the samples
/// and the first column the probes; the other orientation is transposed.
pub fn load_expression_csv(path: impl AsRef<Path>, orientation: Orientation) -> Result<ExpressionMatrix> {
    read_expression_csv(std::fs::File::open(path)?, orientation)
}

pub fn read_expression_csv<R: Read>(reader: R, orientation: Orientation) -> Result<ExpressionMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec?.iter().skip(1).map(|s| s.trim().to_string()).collect(),
        None => return input("expression file is empty"),
    };
    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        let row = r + 2;
        if rec.len() != header.len() + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len().min(header.len() + 1) + 1,
                message: format!("expected {} fields, found {}", header.len() + 1, rec.len()),
            });
        }
        row_ids.push(rec[0].trim().to_string());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let cell = cell.trim();
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                message: format!("not a finite number: {cell:?}"),
            })?;
            data.push(v);
        }
    }
    let rows = row_ids.len();
    let cols = header.len();
    let m = DMatrix::from_row_slice(rows, cols, &data);
    match orientation {
        Orientation::ProbesAsRows => ExpressionMatrix::new(m, row_ids, header),
        Orientation::SamplesAsRows => ExpressionMatrix::new(m.transpose(), header, row_ids),
    }
}

/// Writes probes as rows with a `probe` header cell followed by sample ids.
pub fn write_expression_csv<W: Write>(writer: W, matrix: &ExpressionMatrix) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["probe".to_string()];
    header.extend(matrix.sample_ids.iter().cloned());
    wtr.write_record(&header)?;
    for (r, id) in matrix.probe_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(matrix.values.row(r).iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    /// Number of predictors kept after ranking.
    pub top_m: usize,
    /// Probes whose maximum falls below this quantile of all values are dropped.
    pub max_quantile: f64,
    /// Probes whose range falls below this are dropped.
    pub min_range: f64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self { top_m: 300, max_quantile: 0.25, min_range: 1.0 }
    }
}

/// Screening output: the dataset plus the statistics behind it.
#[derive(Debug, Clone)]
pub struct Screened {
    /// Response probe as `y`, kept probes as named predictors in rank order.
    pub dataset: Dataset,
    /// Expression level the probe maxima are compared against.
    pub threshold: f64,
    /// Probes passing both filters, the response probe excluded.
    pub survivors: usize,
    /// Kept probes with their correlation to the response, in rank order.
    pub ranked: Vec<(String, f64)>,
}

/// Filters and ranks probes against `response_probe`.
///
/// A probe is removed when its maximum over samples is below the
/// `max_quantile` quantile of all matrix values, or when its range is below
/// `min_range`. Survivors are ranked by absolute Pearson correlation with the
/// response probe (ties by probe id) and the top `top_m` become predictors.
pub fn screen_probes(matrix: &ExpressionMatrix, response_probe: &str, config: &ScreenConfig) -> Result<Screened> {
    if config.top_m == 0 {
        return input("top_m must be at least 1");
    }
    if !(config.max_quantile > 0.0 && config.max_quantile <= 1.0) {
        return input(format!("max_quantile must lie in (0, 1], got {}", config.max_quantile));
    }
    if !(config.min_range >= 0.0) {
        return input(format!("min_range must be nonnegative, got {}", config.min_range));
    }
    let target = matrix
        .probe_index(response_probe)
        .ok_or_else(|| Error::Input(format!("response probe {response_probe:?} not in the matrix")))?;
    let threshold = sample_quantile(matrix.values.as_slice(), config.max_quantile);
    let keep = |r: usize| {
        let row = matrix.values.row(r);
        let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        hi >= threshold && hi - lo >= config.min_range
    };
    if !keep(target) {
        return input(format!("response probe {response_probe:?} is removed by the expression filters"));
    }
    let response: Vec<f64> = matrix.values.row(target).iter().copied().collect();
    let mut scored: Vec<(usize, f64)> = (0..matrix.n_probes())
        .filter(|&r| r != target && keep(r))
        .map(|r| {
            let row: Vec<f64> = matrix.values.row(r).iter().copied().collect();
            (r, pearson(&row, &response))
        })
        .collect();
    let survivors = scored.len();
    if survivors == 0 {
        return input("no probes survive the expression filters");
    }
    scored.sort_by(|a, b| {
        b.1.abs().total_cmp(&a.1.abs()).then_with(|| matrix.probe_ids[a.0].cmp(&matrix.probe_ids[b.0]))
    });
    scored.truncate(config.top_m);
    let n = matrix.n_samples();
    let x = DMatrix::from_fn(n, scored.len(), |i, j| matrix.values[(scored[j].0, i)]);
    let names: Vec<String> = scored.iter().map(|(r, _)| matrix.probe_ids[*r].clone()).collect();
    let dataset = Dataset::new(DVector::from_vec(response), x, Some(names.clone()))?
        .with_response_name(Some(response_probe.to_string()));
    let ranked = names.into_iter().zip(scored.iter().map(|s| s.1)).collect();
    Ok(Screened { dataset, threshold, survivors, ranked })
}

/// Pearson correlation; 0 when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Shape of a synthetic expression matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticExpression {
    pub probes: usize,
    pub samples: usize,
    /// Shared latent factors inducing correlation between probes.
    pub factors: usize,
    /// Coefficients of the driver probes in the response.
    pub driver_effects: Vec<f64>,
    /// Fraction of probes expressed at a low, nearly constant level.
    pub silent_fraction: f64,
    /// Degrees of freedom of the t-distributed response noise.
    pub noise_df: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticExpression {
    fn default() -> Self {
        Self {
            probes: 3000,
            samples: 120,
            factors: 6,
            driver_effects: vec![0.9, -0.7, 0.6, 0.5, -0.45, 0.4],
            silent_fraction: 0.3,
            noise_df: 3.0,
            noise_scale: 0.25,
            seed: 5680,
        }
    }
}

/// Identifier of the response probe in [`synthetic_expression`] output.
pub const SYNTHETIC_RESPONSE: &str = "target_at";

/// Identifier of driver probe `k` in [`synthetic_expression`] output.
pub fn synthetic_driver_id(k: usize) -> String {
    format!("driver_{k:02}_at")
}

/// Generates a probes x samples matrix on a log-expression scale. Probes
/// load on shared latent factors; the response probe is a linear function of
/// the driver probes plus heavy-tailed noise. Silent probes sit at a low
/// level with little spread so the expression filters remove them.
pub fn synthetic_expression(spec: &SyntheticExpression) -> Result<ExpressionMatrix> {
    let drivers = spec.driver_effects.len();
    if spec.probes < drivers + 2 || spec.samples < 3 {
        return input("synthetic matrix too small for its driver probes");
    }
    if !(0.0..1.0).contains(&spec.silent_fraction) || !(spec.noise_df > 0.0) || !(spec.noise_scale >= 0.0) {
        return input("invalid synthetic expression parameters");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.samples;
    let factors: DMatrix<f64> = DMatrix::from_fn(spec.factors, s, |_, _| StandardNormal.sample(&mut rng));
    let mut values = DMatrix::zeros(spec.probes, s);
    let mut ids = Vec::with_capacity(spec.probes);
    ids.push(SYNTHETIC_RESPONSE.to_string());
    for k in 0..drivers {
        ids.push(synthetic_driver_id(k));
    }
    for r in ids.len()..spec.probes {
        ids.push(format!("probe_{r:05}_at"));
    }
    let background = drivers + 1;
    let silent_from = spec.probes - ((spec.probes - background) as f64 * spec.silent_fraction) as usize;
    for r in 1..spec.probes {
        if r >= silent_from {
            let level = rng.random_range(2.0..4.0);
            for c in 0..s {
                let z: f64 = StandardNormal.sample(&mut rng);
                values[(r, c)] = level + 0.05 * z;
            }
            continue;
        }
        let level = rng.random_range(6.0..12.0);
        let spread = rng.random_range(0.4..1.2);
        let loadings: Vec<f64> = (0..spec.factors).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lnorm = loadings.iter().map(|l| l * l).sum::<f64>().sqrt().max(1e-12);
        let share = rng.random_range(0.2..0.8f64);
        for c in 0..s {
            let common: f64 = loadings.iter().enumerate().map(|(f, l)| l * factors[(f, c)]).sum::<f64>() / lnorm;
            let own: f64 = StandardNormal.sample(&mut rng);
            values[(r, c)] = level + spread * (share.sqrt() * common + (1.0 - share).sqrt() * own);
        }
    }
    let noise = StudentT::new(spec.noise_df).map_err(|e| Error::Input(e.to_string()))?;
    for c in 0..s {
        let mut v = 8.0;
        for (k, effect) in spec.driver_effects.iter().enumerate() {
            let r = 1 + k;
            let row = values.row(r);
            let mean = row.iter().sum::<f64>() / s as f64;
            v += effect * (values[(r, c)] - mean);
        }
        values[(0, c)] = v + spec.noise_scale * noise.sample(&mut rng);
    }
    let sample_ids = (0..s).map(|c| format!("sample_{:03}", c + 1)).collect();
    ExpressionMatrix::new(values, ids, sample_ids)
}
