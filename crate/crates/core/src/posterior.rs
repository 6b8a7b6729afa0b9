//! Storage for retained MCMC draws and their summaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Run length, burn-in, thinning and seed of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            iterations: 5000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(Error::Config("iterations and thin must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than iterations {}",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }

    /// Whether 1-based iteration `t` is retained.
    pub fn keeps(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Row-major `draws × columns` matrix of retained draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMatrix {
    cols: usize,
    data: Vec<f64>,
}

impl DrawMatrix {
    pub fn new(cols: usize) -> Self {
        Self { cols, data: Vec::new() }
    }

    pub fn from_rows(cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 && !data.is_empty() || cols > 0 && !data.len().is_multiple_of(cols) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {cols}",
                data.len()
            )));
        }
        Ok(Self { cols, data })
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "draw width mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn n_draws(&self) -> usize {
        self.data.len().checked_div(self.cols).unwrap_or(0)
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn extend(&mut self, other: &DrawMatrix) {
        assert_eq!(self.cols, other.cols);
        self.data.extend_from_slice(&other.data);
    }
}

/// Retained draws from one or more chains.
///
/// `latent` holds the latent log-scale process `y` per retained iteration.
/// `traces` holds scalar parameters by name; vector parameters are flattened
/// as `beta[0]`, `beta[1]`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub model: String,
    pub seeds: Vec<u64>,
    pub latent: DrawMatrix,
    pub traces: BTreeMap<String, Vec<f64>>,
}

impl PosteriorDraws {
    pub fn new(model: impl Into<String>, seed: u64, n: usize) -> Self {
        Self {
            model: model.into(),
            seeds: vec![seed],
            latent: DrawMatrix::new(n),
            traces: BTreeMap::new(),
        }
    }

    pub fn retained(&self) -> usize {
        self.latent.n_draws()
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.traces.entry(name.to_string()).or_default().push(value);
    }

    pub fn push_vector(&mut self, prefix: &str, values: &[f64]) {
        for (j, v) in values.iter().enumerate() {
            self.push_scalar(&format!("{prefix}[{j}]"), *v);
        }
    }

    pub fn trace(&self, name: &str) -> Option<&[f64]> {
        self.traces.get(name).map(Vec::as_slice)
    }

    /// Collects `prefix[0..dim]` traces into a draws × dim matrix.
    pub fn vector_draws(&self, prefix: &str, dim: usize) -> Result<DrawMatrix> {
        let cols: Vec<&[f64]> = (0..dim)
            .map(|j| {
                self.trace(&format!("{prefix}[{j}]"))
                    .ok_or_else(|| Error::Shape(format!("no trace {prefix}[{j}]")))
            })
            .collect::<Result<_>>()?;
        let draws = self.retained();
        let mut data = Vec::with_capacity(draws * dim);
        for t in 0..draws {
            data.extend(cols.iter().map(|c| c[t]));
        }
        DrawMatrix::from_rows(dim, data)
    }

    /// Concatenates chains in order. All chains must share model and shape.
    pub fn merge(chains: &[PosteriorDraws]) -> Result<PosteriorDraws> {
        let first = chains
            .first()
            .ok_or_else(|| Error::EmptyInput("no chains to merge".into()))?;
        let mut merged = PosteriorDraws {
            model: first.model.clone(),
            seeds: Vec::new(),
            latent: DrawMatrix::new(first.latent.n_cols()),
            traces: BTreeMap::new(),
        };
        for chain in chains {
            if chain.model != first.model
                || chain.latent.n_cols() != first.latent.n_cols()
                || chain.traces.keys().ne(first.traces.keys())
            {
                return Err(Error::Shape("chains differ in model or parameters".into()));
            }
            merged.seeds.extend(&chain.seeds);
            merged.latent.extend(&chain.latent);
            for (k, v) in &chain.traces {
                merged.traces.entry(k.clone()).or_default().extend(v);
            }
        }
        Ok(merged)
    }

    /// Writes `chain,iteration,parameter,value` rows for every scalar trace.
    pub fn write_dump<W: Write>(&self, chain: usize, writer: &mut csv::Writer<W>) -> Result<()> {
        for (name, values) in &self.traces {
            for (t, v) in values.iter().enumerate() {
                writer.write_record([
                    chain.to_string(),
                    t.to_string(),
                    name.clone(),
                    format_float(*v),
                ])?;
            }
        }
        Ok(())
    }
}

/// Shortest round-tripping decimal representation.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Traces read back from a draw dump, keyed by parameter then chain.
pub type DumpTraces = BTreeMap<String, BTreeMap<usize, Vec<f64>>>;

/// Reads a dump written by [`PosteriorDraws::write_dump`]. A dump without a
/// `chain` column (`iteration,parameter,value`) is read as a single chain 0.
pub fn read_dump<R: Read>(reader: R) -> Result<DumpTraces> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let chain_col = col("chain");
    let (iter_col, param_col, value_col) = match (col("iteration"), col("parameter"), col("value")) {
        (Some(i), Some(p), Some(v)) => (i, p, v),
        _ => {
            return Err(Error::Schema(
                "draw dump needs iteration, parameter and value columns".into(),
            ))
        }
    };
    let mut rows: BTreeMap<(String, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let parse_err = |what: &str| Error::Schema(format!("bad {what} in row {:?}", record));
        let chain = match chain_col {
            Some(c) => record[c].trim().parse().map_err(|_| parse_err("chain"))?,
            None => 0,
        };
        let iteration: usize = record[iter_col].trim().parse().map_err(|_| parse_err("iteration"))?;
        let value: f64 = record[value_col].trim().parse().map_err(|_| parse_err("value"))?;
        rows.entry((record[param_col].trim().to_string(), chain))
            .or_default()
            .push((iteration, value));
    }
    let mut out = DumpTraces::new();
    for ((param, chain), mut values) in rows {
        values.sort_by_key(|(t, _)| *t);
        out.entry(param)
            .or_default()
            .insert(chain, values.into_iter().map(|(_, v)| v).collect());
    }
    Ok(out)
}

/// Per-entry posterior mean and standard deviation of the latent process.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Posterior mean and sample standard deviation (n − 1 denominator; 0 for a
/// single draw) of each latent entry.
pub fn predict_summaries(draws: &PosteriorDraws) -> Result<LatentSummary> {
    summarize_columns(&draws.latent)
}

pub(crate) fn summarize_columns(m: &DrawMatrix) -> Result<LatentSummary> {
    let t = m.n_draws();
    if t == 0 {
        return Err(Error::EmptyInput("no retained draws".into()));
    }
    let n = m.n_cols();
    let mut mean = vec![0.0; n];
    for row in m.rows() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= t as f64);
    let mut ss = vec![0.0; n];
    for row in m.rows() {
        for ((acc, v), mu) in ss.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let sd = ss
        .into_iter()
        .map(|s| if t > 1 { (s / (t - 1) as f64).sqrt() } else { 0.0 })
        .collect();
    Ok(LatentSummary { mean, sd })
}
