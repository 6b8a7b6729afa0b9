//! Flat TOML run configuration. Every key has a default except the input
//! paths, so a minimal file names only `tabulation` and `adjacency`.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use msmm::fay_herriot::FhConfig;
use msmm::mixture::{Algorithm, MixtureConfig, DEFAULT_TRUNCATION};
use msmm::moran::{BasisSize, DEFAULT_FRACTION};
use msmm::msm::MsmConfig;
use msmm::tabulation::GvfOptions;
use msmm::McmcSettings;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Msm,
    Msmm,
    Fh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Dp,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Direct estimates: `state,county,order,count,std_err[,sample_size]`.
    pub tabulation: Option<PathBuf>,
    /// Edge list of neighbouring area ids.
    pub adjacency: Option<PathBuf>,
    /// `area_id,population`; adds a log-population column to the design.
    pub population: Option<PathBuf>,
    pub out: PathBuf,

    pub model: ModelKind,
    pub algorithm: AlgorithmKind,
    pub truncation: usize,
    pub intercept: bool,
    /// Indicator columns for cells 2..L.
    pub cell_indicators: bool,
    /// Share of the positive-eigenvalue basis functions kept...
    pub basis_fraction: f64,
    /// ...unless an explicit count is given.
    pub basis_count: Option<usize>,
    pub gvf_span: f64,

    pub sigma2_beta: f64,
    pub a_eta: f64,
    pub b_eta: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
    /// Inverse-gamma prior on the Fay-Herriot area variance.
    pub fh_a: f64,
    pub fh_b: f64,

    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Fail unless there are enough chains for the potential scale reduction.
    pub gelman_rubin: bool,
    /// Write every retained scalar draw to `draws.csv`.
    pub keep_draws: bool,
    /// Run chains and replicates on the thread pool.
    pub parallel: bool,

    pub replicates: usize,
    /// Also score the single-field model in studies.
    pub simulate_msm: bool,
    /// Synthetic two-field grid used by `simulate` when no tabulation is given.
    pub grid_side: usize,
    pub grid_cells: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tabulation: None,
            adjacency: None,
            population: None,
            out: PathBuf::from("out"),
            model: ModelKind::Msmm,
            algorithm: AlgorithmKind::Dp,
            truncation: DEFAULT_TRUNCATION,
            intercept: true,
            cell_indicators: true,
            basis_fraction: DEFAULT_FRACTION,
            basis_count: None,
            gvf_span: GvfOptions::default().span,
            sigma2_beta: 100.0,
            a_eta: 0.1,
            b_eta: 0.1,
            a_alpha: 1.0,
            b_alpha: 4.0,
            fh_a: 0.1,
            fh_b: 0.1,
            iterations: 10_000,
            burn_in: 5_000,
            thin: 1,
            chains: 2,
            seed: 1,
            gelman_rubin: false,
            keep_draws: false,
            parallel: true,
            replicates: 100,
            simulate_msm: false,
            grid_side: 6,
            grid_cells: 4,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub replicates: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, Failure> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                let mut c: RunConfig =
                    toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
                c.resolve_paths(p.parent().unwrap_or(Path::new("")));
                c
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.tabulation, &mut self.adjacency, &mut self.population].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if self.out.is_relative() {
            self.out = base.join(&self.out);
        }
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.chains {
            self.chains = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.model {
            self.model = v;
        }
        if let Some(v) = o.iterations {
            self.iterations = v;
        }
        if let Some(v) = o.burn_in {
            self.burn_in = v;
        }
        if let Some(v) = o.replicates {
            self.replicates = v;
        }
    }

    /// Checks the settings shared by every command.
    pub fn validate(&self) -> Result<(), Failure> {
        if self.chains == 0 {
            return Err(Failure::config("chains must be at least 1"));
        }
        if self.gelman_rubin && self.chains < 2 {
            return Err(Failure::config("gelman_rubin needs at least 2 chains"));
        }
        if !(self.basis_fraction > 0.0 && self.basis_fraction <= 1.0) {
            return Err(Failure::config(format!("basis_fraction must lie in (0, 1], got {}", self.basis_fraction)));
        }
        if self.basis_count == Some(0) {
            return Err(Failure::config("basis_count must be positive"));
        }
        if !(self.gvf_span > 0.0 && self.gvf_span <= 1.0) {
            return Err(Failure::config(format!("gvf_span must lie in (0, 1], got {}", self.gvf_span)));
        }
        self.mixture().validate()?;
        self.msm().validate()?;
        self.fh().validate()?;
        Ok(())
    }

    /// Checks that the tabulation and adjacency are configured and that every
    /// configured input exists.
    pub fn require_inputs(&self) -> Result<(), Failure> {
        for (name, path) in [("tabulation", &self.tabulation), ("adjacency", &self.adjacency)] {
            if path.is_none() {
                return Err(Failure::config(format!("no {name} file configured")));
            }
        }
        for (name, path) in [
            ("tabulation", &self.tabulation),
            ("adjacency", &self.adjacency),
            ("population", &self.population),
        ] {
            if let Some(p) = path.as_ref().filter(|p| !p.is_file()) {
                return Err(Failure::config(format!("{name} file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn basis_size(&self) -> BasisSize {
        match self.basis_count {
            Some(r) => BasisSize::Count(r),
            None => BasisSize::Fraction(self.basis_fraction),
        }
    }

    pub fn mcmc(&self) -> McmcSettings {
        McmcSettings {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
        }
    }

    pub fn gvf(&self) -> GvfOptions {
        GvfOptions {
            span: self.gvf_span,
            ..Default::default()
        }
    }

    pub fn msm(&self) -> MsmConfig {
        MsmConfig {
            sigma2_beta: self.sigma2_beta,
            a_eta: self.a_eta,
            b_eta: self.b_eta,
            mcmc: self.mcmc(),
            fixed_sigma2_eta: None,
        }
    }

    pub fn mixture(&self) -> MixtureConfig {
        MixtureConfig {
            sigma2_beta: self.sigma2_beta,
            a_eta: self.a_eta,
            b_eta: self.b_eta,
            a_alpha: self.a_alpha,
            b_alpha: self.b_alpha,
            algorithm: match self.algorithm {
                AlgorithmKind::Dp => Algorithm::Dp,
                AlgorithmKind::Truncated => Algorithm::Truncated { m: self.truncation },
            },
            mcmc: self.mcmc(),
            keep_assignments: true,
            ..Default::default()
        }
    }

    pub fn fh(&self) -> FhConfig {
        FhConfig {
            sigma2_beta: self.sigma2_beta,
            a: self.fh_a,
            b: self.fh_b,
            mcmc: self.mcmc(),
            fixed_sigma2: None,
        }
    }
}
