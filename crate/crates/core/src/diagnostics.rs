//! Convergence diagnostics: batch-means Monte Carlo standard errors with the
//! square-root rule, the Geweke statistic, the Gelman-Rubin PSRF and an
//! effective sample size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum draws for a batch-means estimate.
pub const MIN_BATCH_LENGTH: usize = 100;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with an n − 1 denominator.
fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Batch size `floor(√n)` and the number of whole batches.
pub fn batch_layout(len: usize) -> (usize, usize) {
    let size = (len as f64).sqrt().floor() as usize;
    let size = size.max(1);
    (size, len / size)
}

/// Monte Carlo standard error of the chain mean by non-overlapping batch
/// means. Leftover draws are dropped from the front of the chain.
pub fn batch_means_se(chain: &[f64]) -> Result<f64> {
    if chain.len() < MIN_BATCH_LENGTH {
        return Err(Error::InsufficientData(format!(
            "batch means need at least {MIN_BATCH_LENGTH} draws, got {}",
            chain.len()
        )));
    }
    let (size, count) = batch_layout(chain.len());
    let start = chain.len() - size * count;
    let means: Vec<f64> = chain[start..].chunks_exact(size).map(mean).collect();
    Ok((sample_variance(&means) / count as f64).sqrt())
}

/// Geweke z-score comparing the mean of the first `first` fraction of the
/// chain with the last `last` fraction.
pub fn geweke(chain: &[f64], first: f64, last: f64) -> Result<f64> {
    if !(first > 0.0 && last > 0.0 && first + last <= 1.0) {
        return Err(Error::Domain(format!(
            "Geweke windows ({first}, {last}) must be positive and non-overlapping"
        )));
    }
    let n = chain.len();
    let n_first = (first * n as f64).floor() as usize;
    let n_last = (last * n as f64).floor() as usize;
    if n_first < MIN_BATCH_LENGTH || n_last < MIN_BATCH_LENGTH {
        return Err(Error::InsufficientData(format!(
            "Geweke windows of {n_first} and {n_last} draws; each needs {MIN_BATCH_LENGTH}"
        )));
    }
    let head = &chain[..n_first];
    let tail = &chain[n - n_last..];
    let se_head = batch_means_se(head)?;
    let se_tail = batch_means_se(tail)?;
    let se = (se_head * se_head + se_tail * se_tail).sqrt();
    if se == 0.0 {
        return Err(Error::DegenerateChain("both Geweke windows have zero variance".into()));
    }
    Ok((mean(head) - mean(tail)) / se)
}

/// Geweke with the conventional 10% / 50% windows.
pub fn geweke_default(chain: &[f64]) -> Result<f64> {
    geweke(chain, 0.1, 0.5)
}

/// Potential scale reduction factor `√(((n−1)/n·W + B/n) / W)`.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientData("Gelman-Rubin needs at least two chains".into()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("Gelman-Rubin chains must have equal length".into()));
    }
    if n < MIN_BATCH_LENGTH {
        return Err(Error::InsufficientData(format!(
            "Gelman-Rubin chains need at least {MIN_BATCH_LENGTH} draws, got {n}"
        )));
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let between = nf / (m - 1.0) * means.iter().map(|v| (v - grand) * (v - grand)).sum::<f64>();
    let within = chains.iter().map(|c| sample_variance(c)).sum::<f64>() / m;
    if within == 0.0 {
        return Err(Error::DegenerateChain("chains have zero within-chain variance".into()));
    }
    let pooled = (nf - 1.0) / nf * within + between / nf;
    Ok((pooled / within).sqrt())
}

/// `n · s² / σ²_bm` with `σ²_bm = n · MCSE²` the batch-means estimate of the
/// asymptotic variance, capped at the chain length. A constant chain has ESS
/// equal to its length.
pub fn effective_sample_size(chain: &[f64]) -> Result<f64> {
    let se = batch_means_se(chain)?;
    let n = chain.len() as f64;
    let var = sample_variance(chain);
    if var == 0.0 || se == 0.0 {
        return Ok(n);
    }
    Ok((var / (se * se)).min(n))
}

/// Diagnostics for one scalar quantity, pooled over chains where relevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub draws: usize,
    pub mean: f64,
    pub mcse: Option<f64>,
    /// Geweke z per chain.
    pub geweke: Vec<Option<f64>>,
    pub ess: Option<f64>,
    pub psrf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiagnosticsReport {
    pub parameters: Vec<ParameterDiagnostics>,
}

impl DiagnosticsReport {
    /// Diagnoses every named quantity given its per-chain traces. Statistics
    /// that cannot be computed (too short, degenerate, single chain) are
    /// reported as `None`.
    pub fn from_chains(traces: &BTreeMap<String, Vec<Vec<f64>>>) -> Self {
        let parameters = traces
            .iter()
            .map(|(name, chains)| {
                let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
                let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
                ParameterDiagnostics {
                    name: name.clone(),
                    draws: pooled.len(),
                    mean: if pooled.is_empty() { f64::NAN } else { mean(&pooled) },
                    mcse: batch_means_se(&pooled).ok(),
                    geweke: chains.iter().map(|c| geweke_default(c).ok()).collect(),
                    ess: effective_sample_size(&pooled).ok(),
                    psrf: gelman_rubin(&refs).ok(),
                }
            })
            .collect();
        Self { parameters }
    }

    pub fn get(&self, name: &str) -> Option<&ParameterDiagnostics> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
