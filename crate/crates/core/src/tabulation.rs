//! Tabulation ingestion, the log transform, sampling-variance construction
//! and the back-transform of posterior draws to counts.
//!
//! Entries are stored area-major: position `a * cells + (cell - 1)` for the
//! `a`-th area in sorted order. This matches the row order of the
//! multivariate adjacency `W ⊗ 1 1ᵀ`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::loess::Loess;
use crate::posterior::{format_float, DrawMatrix, LatentSummary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TabulationRow {
    pub area_id: String,
    pub cell_index: usize,
    pub estimate: f64,
    pub std_err: f64,
    pub sample_size: Option<u64>,
}

/// Direct estimates for every `(area, cell)` pair of a multi-way table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulationTable {
    areas: Vec<String>,
    cells: usize,
    rows: Vec<TabulationRow>,
}

impl TabulationTable {
    /// Validates and normalizes rows into area-major, cell-minor order.
    pub fn new(mut rows: Vec<TabulationRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Schema("tabulation has no rows".into()));
        }
        for r in &rows {
            if r.cell_index == 0 {
                return Err(Error::Domain(format!(
                    "cell index must start at 1 (area {})",
                    r.area_id
                )));
            }
            if !(r.estimate >= 0.0 && r.estimate.is_finite()) {
                return Err(Error::Domain(format!(
                    "estimate {} for ({}, {}) must be a finite nonnegative number",
                    r.estimate, r.area_id, r.cell_index
                )));
            }
            if !(r.std_err >= 0.0 && r.std_err.is_finite()) {
                return Err(Error::Domain(format!(
                    "standard error {} for ({}, {}) must be a finite nonnegative number",
                    r.std_err, r.area_id, r.cell_index
                )));
            }
            if r.sample_size == Some(0) {
                return Err(Error::Domain(format!(
                    "sample size for ({}, {}) must be positive",
                    r.area_id, r.cell_index
                )));
            }
        }
        rows.sort_by(|a, b| a.area_id.cmp(&b.area_id).then(a.cell_index.cmp(&b.cell_index)));
        for pair in rows.windows(2) {
            if pair[0].area_id == pair[1].area_id && pair[0].cell_index == pair[1].cell_index {
                return Err(Error::DuplicateKey {
                    area: pair[0].area_id.clone(),
                    cell: pair[0].cell_index,
                });
            }
        }
        let cells = rows.iter().map(|r| r.cell_index).max().unwrap_or(0);
        let mut areas: Vec<String> = rows.iter().map(|r| r.area_id.clone()).collect();
        areas.dedup();
        if rows.len() != areas.len() * cells {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &rows {
                *counts.entry(&r.area_id).or_default() += 1;
            }
            let short = counts.iter().find(|(_, c)| **c != cells).map(|(a, _)| *a);
            return Err(Error::Schema(format!(
                "every area needs all {cells} cells; area {} is incomplete",
                short.unwrap_or("?")
            )));
        }
        Ok(Self { areas, cells, rows })
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn rows(&self) -> &[TabulationRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_sample_sizes(&self) -> bool {
        self.rows.iter().all(|r| r.sample_size.is_some())
    }
}

/// Column names used when reading a tabulation CSV.
///
/// The area id is `state` followed by `county`, concatenated as written in
/// the file (leading zeros kept). Set `state` to `None` when the county
/// column already carries the full id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub state: Option<String>,
    pub county: String,
    pub order: String,
    pub count: String,
    pub std_err: String,
    pub sample_size: Option<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            state: Some("state".into()),
            county: "county".into(),
            order: "order".into(),
            count: "count".into(),
            std_err: "std_err".into(),
            sample_size: Some("sample_size".into()),
        }
    }
}

pub fn load_tabulation(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<TabulationTable> {
    let file = std::fs::File::open(path.as_ref())?;
    read_tabulation(file, schema)
}

/// Reads a tabulation from CSV. A configured `sample_size` column that is
/// absent from the header is ignored; any other missing column is an error.
pub fn read_tabulation<R: Read>(reader: R, schema: &ColumnSchema) -> Result<TabulationTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Schema("missing header row".into()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let state = schema.state.as_deref().map(find).transpose()?;
    let county = find(&schema.county)?;
    let order = find(&schema.order)?;
    let count = find(&schema.count)?;
    let std_err = find(&schema.std_err)?;
    let sample_size = schema
        .sample_size
        .as_deref()
        .and_then(|name| headers.iter().position(|h| h == name));

    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |idx: usize, what: &str| {
            record
                .get(idx)
                .ok_or_else(|| Error::Schema(format!("row {}: missing {what}", line + 2)))
        };
        let number = |idx: usize, what: &str| -> Result<f64> {
            let raw = field(idx, what)?;
            raw.parse::<f64>()
                .map_err(|_| Error::Schema(format!("row {}: {what} `{raw}` is not a number", line + 2)))
        };
        let area_id = match state {
            Some(s) => format!("{}{}", field(s, "state")?, field(county, "county")?),
            None => field(county, "county")?.to_string(),
        };
        let raw_order = field(order, "order")?;
        let cell_index = raw_order.parse::<usize>().map_err(|_| {
            Error::Schema(format!("row {}: order `{raw_order}` is not a positive integer", line + 2))
        })?;
        let sample = match sample_size.map(|i| field(i, "sample size")).transpose()? {
            Some("") | None => None,
            Some(raw) => Some(raw.parse::<u64>().map_err(|_| {
                Error::Schema(format!("row {}: sample size `{raw}` is not an integer", line + 2))
            })?),
        };
        rows.push(TabulationRow {
            area_id,
            cell_index,
            estimate: number(count, "count")?,
            std_err: number(std_err, "std_err")?,
            sample_size: sample,
        });
    }
    TabulationTable::new(rows)
}

/// Log-scale estimates `z = log(estimate + 1)` and their sampling variances.
/// A variance of `None` marks an entry that still needs imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTable {
    pub z: Vec<f64>,
    pub d: Vec<Option<f64>>,
    areas: Vec<String>,
    cells: usize,
    index: HashMap<(String, usize), usize>,
}

impl LogTable {
    pub fn new(areas: Vec<String>, cells: usize, z: Vec<f64>, d: Vec<Option<f64>>) -> Result<Self> {
        if z.len() != areas.len() * cells || d.len() != z.len() {
            return Err(Error::Shape(format!(
                "{} areas x {cells} cells vs {} estimates and {} variances",
                areas.len(),
                z.len(),
                d.len()
            )));
        }
        let mut index = HashMap::with_capacity(z.len());
        for (a, area) in areas.iter().enumerate() {
            for c in 0..cells {
                index.insert((area.clone(), c + 1), a * cells + c);
            }
        }
        Ok(Self { z, d, areas, cells, index })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn position(&self, area_id: &str, cell_index: usize) -> Option<usize> {
        self.index.get(&(area_id.to_string(), cell_index)).copied()
    }

    pub fn needs_imputation(&self) -> Vec<usize> {
        (0..self.d.len()).filter(|&i| self.d[i].is_none()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.d.iter().all(Option::is_some)
    }

    /// The variance vector, failing if any entry is still undefined.
    pub fn variances(&self) -> Result<Vec<f64>> {
        self.d
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    Error::InsufficientData(format!("variance of entry {i} has not been imputed"))
                })
            })
            .collect()
    }

    pub fn with_values(&self, z: Vec<f64>) -> Result<Self> {
        Self::new(self.areas.clone(), self.cells, z, self.d.clone())
    }
}

/// First-order variance of `log(estimate + 1)`.
pub fn delta_method_variance(estimate: f64, std_err: f64) -> f64 {
    let denom = estimate + 1.0;
    std_err * std_err / (denom * denom)
}

/// Moves a table to the log scale. Zero estimates, and entries whose delta
/// method variance is not positive, are left without a variance.
pub fn log_transform(table: &TabulationTable) -> LogTable {
    let z = table.rows.iter().map(|r| r.estimate.ln_1p()).collect();
    let d = table
        .rows
        .iter()
        .map(|r| {
            let v = delta_method_variance(r.estimate, r.std_err);
            (r.estimate > 0.0 && v > 0.0 && v.is_finite()).then_some(v)
        })
        .collect();
    LogTable::new(table.areas.clone(), table.cells, z, d).expect("table shape already validated")
}

/// The generalized-variance-function predictor: log sample size when every
/// row has one, otherwise `log(estimate + 1)`.
pub fn gvf_predictor(table: &TabulationTable) -> Vec<f64> {
    if table.has_sample_sizes() {
        table.rows.iter().map(|r| (r.sample_size.unwrap() as f64).ln()).collect()
    } else {
        table.rows.iter().map(|r| r.estimate.ln_1p()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GvfOptions {
    pub span: f64,
    /// Lower bound applied to every imputed variance.
    pub floor: f64,
}

impl Default for GvfOptions {
    fn default() -> Self {
        Self { span: 0.75, floor: 1e-6 }
    }
}

/// Fills undefined variances with a LOESS fit of the defined variances on
/// `predictor`. Defined entries are returned untouched.
pub fn gvf_impute(table: &LogTable, predictor: &[f64], options: GvfOptions) -> Result<LogTable> {
    if predictor.len() != table.len() {
        return Err(Error::Shape(format!(
            "predictor has {} entries, table has {}",
            predictor.len(),
            table.len()
        )));
    }
    let missing = table.needs_imputation();
    if missing.is_empty() {
        return Ok(table.clone());
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = table
        .d
        .iter()
        .zip(predictor)
        .filter_map(|(d, x)| d.map(|d| (*x, d)))
        .unzip();
    if xs.is_empty() {
        return Err(Error::InsufficientData("no entry has a defined variance".into()));
    }
    let smoother = Loess::fit(&xs, &ys, options.span)?;
    let mut out = table.clone();
    for i in missing {
        out.d[i] = Some(smoother.predict(predictor[i]).max(options.floor));
    }
    Ok(out)
}

/// Count-scale posterior summary of one entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountSummary {
    pub mean: f64,
    pub sd: f64,
    /// `sd / mean`; `None` when the mean is zero.
    pub cv: Option<f64>,
}

/// Applies `exp(y) − 1` to every draw, then summarizes across draws.
pub fn back_transform(draws: &DrawMatrix) -> Result<Vec<CountSummary>> {
    if draws.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("draws must be finite".into()));
    }
    let counts = DrawMatrix::from_rows(
        draws.n_cols(),
        draws.as_slice().iter().map(|y| y.exp_m1()).collect(),
    )?;
    let LatentSummary { mean, sd } = crate::posterior::summarize_columns(&counts)?;
    Ok(mean
        .into_iter()
        .zip(sd)
        .map(|(mean, sd)| CountSummary {
            mean,
            sd,
            cv: (mean != 0.0).then(|| sd / mean),
        })
        .collect())
}

/// Average relative reduction `1 − cv_model / cv_direct` over entries with a
/// nonzero direct estimate and a defined model CV.
pub fn mean_cv_reduction(table: &TabulationTable, counts: &[CountSummary]) -> Option<f64> {
    let ratios: Vec<f64> = table
        .rows
        .iter()
        .zip(counts)
        .filter(|(r, _)| r.estimate > 0.0 && r.std_err > 0.0)
        .filter_map(|(r, c)| c.cv.map(|cv| 1.0 - cv / (r.std_err / r.estimate)))
        .collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

pub const PREDICTION_HEADER: [&str; 9] = [
    "area_id",
    "cell_index",
    "pred_log_mean",
    "pred_log_sd",
    "pred_count_mean",
    "pred_count_sd",
    "cv",
    "direct_count",
    "direct_se",
];

/// Writes one prediction row per table entry; a missing CV is an empty field.
pub fn write_predictions<W: Write>(
    writer: W,
    table: &TabulationTable,
    log_scale: &LatentSummary,
    counts: &[CountSummary],
) -> Result<()> {
    if log_scale.mean.len() != table.len() || counts.len() != table.len() {
        return Err(Error::Shape("prediction summaries do not match the table".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTION_HEADER)?;
    for (i, row) in table.rows.iter().enumerate() {
        let c = counts[i];
        w.write_record([
            row.area_id.clone(),
            row.cell_index.to_string(),
            format_float(log_scale.mean[i]),
            format_float(log_scale.sd[i]),
            format_float(c.mean),
            format_float(c.sd),
            c.cv.map(format_float).unwrap_or_default(),
            format_float(row.estimate),
            format_float(row.std_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}
