//! Dirichlet-process mixture over per-observation coefficient vectors
//! `θ_i = (β_i, η_i)`, with `y_i = u_iᵀθ_i` and `u_i = (x_i, ψ_i)`.
//!
//! The base measure is `N(0, σ²_β I) × N(0, σ²_η K)`, conjugate to the
//! Gaussian data model, so two samplers are available:
//!
//! * [`fit_msmm_dp`]: exact collapsed Gibbs. Each observation is reseated
//!   with θ integrated out; cluster coefficients are then redrawn from their
//!   Gaussian posteriors, followed by σ²_η and the Escobar-West update of α.
//! * [`fit_msmm_truncated`]: blocked Gibbs on the stick-breaking prior cut at
//!   `M` components.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::gaussian::{sample_gamma_rate, Gaussian, InverseGamma};
use crate::moran::MoranBasis;
use crate::observations::Observations;
use crate::posterior::{McmcSettings, PosteriorDraws};
use crate::seed::rng_from_seed;
use crate::{Error, Result};

/// Consecutive single-cluster iterations before a warning is raised.
pub const SINGLE_CLUSTER_WARNING: usize = 100;

/// Default truncation level for the blocked sampler.
pub const DEFAULT_TRUNCATION: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Collapsed Gibbs under the exact Dirichlet process.
    Dp,
    /// Blocked Gibbs under the stick-breaking prior truncated at `m` terms.
    Truncated { m: usize },
}

/// Starting partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initialization {
    /// Every observation in one cluster.
    OneCluster,
    /// Every observation in its own cluster (capped at the truncation level
    /// for the blocked sampler, assigning `i mod M`).
    Singletons,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureConfig {
    pub sigma2_beta: f64,
    pub a_eta: f64,
    pub b_eta: f64,
    /// Gamma shape for α.
    pub a_alpha: f64,
    /// Gamma rate for α.
    pub b_alpha: f64,
    pub algorithm: Algorithm,
    pub mcmc: McmcSettings,
    pub fixed_alpha: Option<f64>,
    pub fixed_sigma2_eta: Option<f64>,
    /// Ignore the data: the sampler then targets the prior partition law.
    pub prior_only: bool,
    /// Store the cluster assignment of every observation for each retained
    /// draw (needed for [`MixturePosterior::point_partition`]).
    pub keep_assignments: bool,
    pub init: Initialization,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            sigma2_beta: 100.0,
            a_eta: 0.1,
            b_eta: 0.1,
            a_alpha: 1.0,
            b_alpha: 4.0,
            algorithm: Algorithm::Dp,
            mcmc: McmcSettings::default(),
            fixed_alpha: None,
            fixed_sigma2_eta: None,
            prior_only: false,
            keep_assignments: false,
            init: Initialization::OneCluster,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        for (name, v) in [
            ("sigma2_beta", self.sigma2_beta),
            ("a_eta", self.a_eta),
            ("b_eta", self.b_eta),
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.fixed_alpha), ("sigma2_eta", self.fixed_sigma2_eta)] {
            if matches!(v, Some(v) if !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("fixed {name} must be positive")));
            }
        }
        if let Algorithm::Truncated { m } = self.algorithm {
            if m < 2 {
                return Err(Error::Config(format!("truncation level must be at least 2, got {m}")));
            }
        }
        Ok(())
    }

    fn initial_alpha(&self) -> f64 {
        self.fixed_alpha.unwrap_or(self.a_alpha / self.b_alpha)
    }

    fn initial_assignments(&self, n: usize, clusters: usize) -> Vec<usize> {
        match self.init {
            Initialization::OneCluster => vec![0; n],
            Initialization::Singletons => (0..n).map(|i| i % clusters).collect(),
        }
    }
}

/// `G₀ = N(0, σ²_β I_p) × N(0, σ²_η K)` on θ = (β, η).
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMeasure {
    pub p: usize,
    pub sigma2_beta: f64,
    pub sigma2_eta: f64,
    pub k: DMatrix<f64>,
    pub k_inv: DMatrix<f64>,
}

impl BaseMeasure {
    pub fn new(p: usize, sigma2_beta: f64, sigma2_eta: f64, basis: &MoranBasis) -> Result<Self> {
        if !(sigma2_beta > 0.0 && sigma2_eta > 0.0) {
            return Err(Error::Domain("base measure variances must be positive".into()));
        }
        Ok(Self {
            p,
            sigma2_beta,
            sigma2_eta,
            k: basis.k.clone(),
            k_inv: basis.k_inv.clone(),
        })
    }

    pub fn r(&self) -> usize {
        self.k.nrows()
    }

    pub fn dim(&self) -> usize {
        self.p + self.r()
    }

    /// Block-diagonal prior covariance `Σ₀`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.dim(), self.dim());
        for j in 0..self.p {
            s[(j, j)] = self.sigma2_beta;
        }
        s.view_mut((self.p, self.p), (self.r(), self.r())).copy_from(&(&self.k * self.sigma2_eta));
        s
    }

    /// Block-diagonal prior precision `Σ₀⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.dim(), self.dim());
        for j in 0..self.p {
            s[(j, j)] = 1.0 / self.sigma2_beta;
        }
        s.view_mut((self.p, self.p), (self.r(), self.r())).copy_from(&(&self.k_inv / self.sigma2_eta));
        s
    }

    /// `ηᵀK⁻¹η` for the η block of θ.
    fn eta_quadratic(&self, theta: &DVector<f64>) -> f64 {
        if self.r() == 0 {
            return 0.0;
        }
        let eta = theta.rows(self.p, self.r());
        (eta.transpose() * &self.k_inv * eta)[(0, 0)]
    }
}

/// `U = [X Ψ]`, one row `u_i` per observation.
pub fn combined_design(x: &DMatrix<f64>, basis: &MoranBasis) -> Result<DMatrix<f64>> {
    if x.nrows() != basis.psi.nrows() {
        return Err(Error::Shape(format!(
            "design has {} rows, basis has {}",
            x.nrows(),
            basis.psi.nrows()
        )));
    }
    let (p, r) = (x.ncols(), basis.rank());
    let mut u = DMatrix::zeros(x.nrows(), p + r);
    u.columns_mut(0, p).copy_from(x);
    u.columns_mut(p, r).copy_from(&basis.psi);
    Ok(u)
}

/// Posterior of a cluster's θ given its members:
/// precision `Σ₀⁻¹ + Σ u_i u_iᵀ/d_i`, linear term `Σ u_i z_i/d_i`.
pub fn cluster_posterior(members: &[usize], obs: &Observations, u: &DMatrix<f64>, base: &BaseMeasure) -> Result<Gaussian> {
    let mut stats = SuffStats::new(base.dim());
    for &i in members {
        stats.add(u, obs, i);
    }
    Gaussian::from_canonical(base.precision() + &stats.suu, &stats.suz)
}

/// Cluster sufficient statistics `Σ u uᵀ/d` and `Σ u z/d`.
#[derive(Debug, Clone)]
struct SuffStats {
    count: usize,
    suu: DMatrix<f64>,
    suz: DVector<f64>,
}

impl SuffStats {
    fn new(q: usize) -> Self {
        Self {
            count: 0,
            suu: DMatrix::zeros(q, q),
            suz: DVector::zeros(q),
        }
    }

    fn add(&mut self, u: &DMatrix<f64>, obs: &Observations, i: usize) {
        self.update(u, obs, i, 1.0);
        self.count += 1;
    }

    fn remove(&mut self, u: &DMatrix<f64>, obs: &Observations, i: usize) {
        self.update(u, obs, i, -1.0);
        self.count -= 1;
    }

    fn update(&mut self, u: &DMatrix<f64>, obs: &Observations, i: usize, sign: f64) {
        let w = sign / obs.d()[i];
        let row = u.row(i);
        let q = row.len();
        for a in 0..q {
            let ua = row[a] * w;
            self.suz[a] += ua * obs.z()[i];
            for b in 0..q {
                self.suu[(a, b)] += ua * row[b];
            }
        }
    }
}

/// Cholesky factor `L` of a cluster's posterior precision and `w = L⁻¹h`, so
/// the predictive of a new member is `N(vᵀw, vᵀv + d)` with `v = L⁻¹u`.
#[derive(Debug, Clone)]
struct PredictiveFactor {
    l: DMatrix<f64>,
    w: DVector<f64>,
}

impl PredictiveFactor {
    fn new(prior_precision: &DMatrix<f64>, stats: &SuffStats) -> Result<Self> {
        let precision = prior_precision + &stats.suu;
        let l = precision
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("cluster posterior precision".into()))?
            .unpack();
        let w = l.solve_lower_triangular(&stats.suz).expect("positive diagonal");
        Ok(Self { l, w })
    }

    fn log_predictive(&self, u: &DMatrix<f64>, obs: &Observations, i: usize) -> f64 {
        let v = self
            .l
            .solve_lower_triangular(&u.row(i).transpose())
            .expect("positive diagonal");
        normal_log_pdf(obs.z()[i], v.dot(&self.w), v.norm_squared() + obs.d()[i])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mean = self.l.tr_solve_lower_triangular(&self.w).expect("positive diagonal");
        let eps = DVector::from_fn(self.l.nrows(), |_, _| rand_distr::StandardNormal.sample(rng));
        mean + self.l.tr_solve_lower_triangular(&eps).expect("positive diagonal")
    }
}

fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

/// Draws an index with probability proportional to `exp(log_weights)`.
fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Cluster labels `0..k` with per-cluster coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub assignments: Vec<usize>,
    pub thetas: Vec<DVector<f64>>,
    pub alpha: f64,
    pub sigma2_eta: f64,
}

impl MixtureState {
    pub fn n_clusters(&self) -> usize {
        self.thetas.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.thetas.len()];
        for &a in &self.assignments {
            c[a] += 1;
        }
        c
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }

    /// `y_i = u_iᵀθ_{c_i}`.
    pub fn latent(&self, u: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.assignments.len(), |i, _| {
            u.row(i).dot(&self.thetas[self.assignments[i]].transpose())
        })
    }
}

/// Reseating probabilities for one observation; the last entry of `probs`
/// is the new-cluster probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProbs {
    /// Existing cluster labels, in the order of `probs`.
    pub clusters: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Collapsed reseating probabilities for observation `i`, treating `i` as
/// removed from its current cluster:
/// `P(c) ∝ n_{−i,c} N(z_i; u_iᵀm_c, u_iᵀS_c u_i + d_i)` for clusters that
/// stay nonempty, `P(new) ∝ α N(z_i; 0, u_iᵀΣ₀u_i + d_i)`.
pub fn crp_assignment_probs(
    i: usize,
    state: &MixtureState,
    obs: &Observations,
    u: &DMatrix<f64>,
    base: &BaseMeasure,
) -> Result<AssignmentProbs> {
    if i >= obs.len() || state.assignments.len() != obs.len() {
        return Err(Error::Shape("observation index or state size out of range".into()));
    }
    let prior_precision = base.precision();
    let mut clusters = Vec::new();
    let mut log_weights = Vec::new();
    for c in 0..state.n_clusters() {
        let mut stats = SuffStats::new(base.dim());
        for j in state.members(c) {
            if j != i {
                stats.add(u, obs, j);
            }
        }
        if stats.count == 0 {
            continue;
        }
        let factor = PredictiveFactor::new(&prior_precision, &stats)?;
        clusters.push(c);
        log_weights.push((stats.count as f64).ln() + factor.log_predictive(u, obs, i));
    }
    let ui = u.row(i).transpose();
    let prior_var = (ui.transpose() * base.covariance() * &ui)[(0, 0)];
    log_weights.push(state.alpha.ln() + normal_log_pdf(obs.z()[i], 0.0, prior_var + obs.d()[i]));
    Ok(AssignmentProbs {
        clusters,
        probs: normalize_log_weights(&log_weights),
    })
}

/// Escobar-West auxiliary-variable update of the concentration under a
/// `Gamma(a, b)` (shape, rate) prior given `k` clusters among `n` items.
pub fn update_alpha_escobar_west<R: Rng + ?Sized>(k: usize, n: usize, alpha: f64, a_alpha: f64, b_alpha: f64, rng: &mut R) -> f64 {
    assert!(k >= 1 && n >= 1, "need at least one cluster and one item");
    let zeta = Beta::new(alpha + 1.0, n as f64).expect("positive parameters").sample(rng);
    let rate = b_alpha - zeta.ln();
    let shape_hi = a_alpha + k as f64;
    let odds = (shape_hi - 1.0) / (n as f64 * rate);
    let weight_hi = odds / (1.0 + odds);
    let shape = if rng.random::<f64>() < weight_hi { shape_hi } else { shape_hi - 1.0 };
    sample_gamma_rate(shape, rate, rng).max(f64::MIN_POSITIVE)
}

/// Stick-breaking weights `π_k = V_k Π_{b<k}(1 − V_b)`, with the last weight
/// taking the remaining stick.
pub fn stick_break(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = v.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
        return Err(Error::Domain(format!("stick proportions must lie in (0, 1), got {bad}")));
    }
    let mut remaining = 1.0;
    let mut pi = Vec::with_capacity(v.len() + 1);
    for &vk in v {
        pi.push(vk * remaining);
        remaining *= 1.0 - vk;
    }
    pi.push(remaining);
    Ok(pi)
}

/// Exact prior mean of the number of clusters, `Σ_{i=1}^n α/(α + i − 1)`.
pub fn prior_expected_clusters(alpha: f64, n: usize) -> f64 {
    (1..=n).map(|i| alpha / (alpha + (i - 1) as f64)).sum()
}

/// Number of tables after seating `n` customers by the Chinese restaurant
/// process with concentration `alpha`.
pub fn simulate_crp_clusters<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> usize {
    (0..n).filter(|&i| rng.random::<f64>() < alpha / (alpha + i as f64)).count()
}

/// Draws and side information from a mixture fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosterior {
    /// Latent `y` plus traces `alpha`, `sigma2_eta` and `k`.
    pub draws: PosteriorDraws,
    /// Per retained draw, the cluster label of each observation.
    pub assignments: Option<Vec<Vec<u32>>>,
    pub warnings: Vec<String>,
}

impl MixturePosterior {
    /// Most frequent cluster count among retained draws (smallest on ties).
    pub fn modal_clusters(&self) -> Option<usize> {
        let ks = self.draws.trace("k")?;
        let mut counts = std::collections::BTreeMap::new();
        for &k in ks {
            *counts.entry(k as usize).or_insert(0usize) += 1;
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(k, _)| k)
    }

    /// Posterior co-clustering frequencies, `n × n`.
    pub fn similarity_matrix(&self) -> Option<DMatrix<f64>> {
        let draws = self.assignments.as_ref()?;
        let n = draws.first()?.len();
        let mut psm = DMatrix::zeros(n, n);
        for labels in draws {
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == labels[j] {
                        psm[(i, j)] += 1.0;
                    }
                }
            }
        }
        Some(psm / draws.len() as f64)
    }

    /// Least-squares point partition: the retained draw whose co-clustering
    /// matrix is closest to the posterior similarity matrix. Labels are
    /// renumbered by first appearance.
    pub fn point_partition(&self) -> Option<Vec<usize>> {
        let draws = self.assignments.as_ref()?;
        let psm = self.similarity_matrix()?;
        let n = psm.nrows();
        let loss = |labels: &Vec<u32>| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let same = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                    s += (same - psm[(i, j)]).powi(2);
                }
            }
            s
        };
        let best = draws
            .iter()
            .map(|l| (loss(l), l))
            .min_by(|a, b| a.0.total_cmp(&b.0))?
            .1;
        Some(canonical_labels(best))
    }
}

/// Renumbers labels `0, 1, ...` by order of first appearance.
pub fn canonical_labels<T: Copy + PartialEq>(labels: &[T]) -> Vec<usize> {
    let mut seen: Vec<T> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(k) => k,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

/// Runs whichever sampler `config.algorithm` selects.
pub fn fit_msmm(obs: &Observations, x: &DMatrix<f64>, basis: &MoranBasis, config: &MixtureConfig) -> Result<MixturePosterior> {
    match config.algorithm {
        Algorithm::Dp => fit_msmm_dp(obs, x, basis, config),
        Algorithm::Truncated { m } => fit_msmm_truncated(obs, x, basis, m, config),
    }
}

/// Bookkeeping common to both samplers.
struct Recorder {
    draws: PosteriorDraws,
    assignments: Option<Vec<Vec<u32>>>,
    warnings: Vec<String>,
    single_run: usize,
}

impl Recorder {
    fn new(model: &str, config: &MixtureConfig, n: usize) -> Self {
        Self {
            draws: PosteriorDraws::new(model, config.mcmc.seed, n),
            assignments: config.keep_assignments.then(Vec::new),
            warnings: Vec::new(),
            single_run: 0,
        }
    }

    fn observe_clusters(&mut self, t: usize, k: usize) {
        if k == 1 {
            self.single_run += 1;
            if self.single_run == SINGLE_CLUSTER_WARNING {
                let msg = format!(
                    "all observations shared one cluster for {SINGLE_CLUSTER_WARNING} consecutive iterations \
                     (ending at iteration {t}); the fit may be equivalent to a single-field model"
                );
                log::warn!("{msg}");
                self.warnings.push(msg);
            }
        } else {
            self.single_run = 0;
        }
    }

    fn record(&mut self, y: &DVector<f64>, assignments: &[usize], k: usize, alpha: f64, sigma2_eta: f64) {
        self.draws.latent.push(y.as_slice());
        self.draws.push_scalar("alpha", alpha);
        self.draws.push_scalar("sigma2_eta", sigma2_eta);
        self.draws.push_scalar("k", k as f64);
        if let Some(store) = self.assignments.as_mut() {
            store.push(assignments.iter().map(|&a| a as u32).collect());
        }
    }

    fn finish(self) -> MixturePosterior {
        MixturePosterior {
            draws: self.draws,
            assignments: self.assignments,
            warnings: self.warnings,
        }
    }
}

fn check_iteration(t: usize, y: &DVector<f64>, alpha: f64, sigma2_eta: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) && alpha.is_finite() && alpha > 0.0 && sigma2_eta.is_finite() && sigma2_eta > 0.0 {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration: t,
            what: "non-finite latent value or parameter".into(),
        })
    }
}

fn sample_sigma2_eta<R: Rng + ?Sized>(
    config: &MixtureConfig,
    base: &BaseMeasure,
    thetas: &[&DVector<f64>],
    rng: &mut R,
) -> Result<f64> {
    if let Some(s) = config.fixed_sigma2_eta {
        return Ok(s);
    }
    if base.r() == 0 {
        // no η block: the full conditional is the prior
        return Ok(InverseGamma::new(config.a_eta, config.b_eta)?.sample(rng));
    }
    let quad: f64 = thetas.iter().map(|th| base.eta_quadratic(th)).sum();
    let shape = config.a_eta + (thetas.len() * base.r()) as f64 / 2.0;
    Ok(InverseGamma::new(shape, config.b_eta + 0.5 * quad)?.sample(rng))
}

/// Collapsed Gibbs sampler under the exact Dirichlet process.
pub fn fit_msmm_dp(obs: &Observations, x: &DMatrix<f64>, basis: &MoranBasis, config: &MixtureConfig) -> Result<MixturePosterior> {
    config.validate()?;
    let n = obs.len();
    let u = combined_design(x, basis)?;
    if u.nrows() != n {
        return Err(Error::Shape(format!("{n} observations, design has {} rows", u.nrows())));
    }
    let q = u.ncols();
    let p = x.ncols();
    let mut rng = rng_from_seed(config.mcmc.seed);
    let mut base = BaseMeasure::new(p, config.sigma2_beta, config.fixed_sigma2_eta.unwrap_or(1.0), basis)?;
    // u_iᵀΣ₀u_i = σ²_β·beta_part_i + σ²_η·eta_part_i
    let beta_part: Vec<f64> = (0..n).map(|i| u.row(i).columns(0, p).norm_squared()).collect();
    let eta_part: Vec<f64> = (0..n)
        .map(|i| {
            if base.r() == 0 {
                return 0.0;
            }
            let e = u.row(i).columns(p, base.r()).transpose();
            (e.transpose() * &base.k * &e)[(0, 0)]
        })
        .collect();

    let mut assignments = config.initial_assignments(n, n);
    let mut alpha = config.initial_alpha();
    let mut thetas: Vec<DVector<f64>> = vec![DVector::zeros(q); assignments.iter().max().map_or(0, |c| c + 1)];
    let mut rec = Recorder::new("msmm-dp", config, n);

    for t in 1..=config.mcmc.iterations {
        let prior_precision = base.precision();
        let empty = SuffStats::new(q);
        let mut stats: Vec<SuffStats> = vec![empty.clone(); thetas.len()];
        for i in 0..n {
            let c = assignments[i];
            if config.prior_only {
                stats[c].count += 1;
            } else {
                stats[c].add(&u, obs, i);
            }
        }
        let mut factors: Vec<PredictiveFactor> = stats
            .iter()
            .map(|s| PredictiveFactor::new(&prior_precision, s))
            .collect::<Result<_>>()
            .map_err(|e| Error::Divergence { iteration: t, what: e.to_string() })?;

        // (1) reseat every observation
        let mut log_weights = Vec::with_capacity(stats.len() + 1);
        for i in 0..n {
            let c = assignments[i];
            if config.prior_only {
                stats[c].count -= 1;
            } else {
                stats[c].remove(&u, obs, i);
            }
            let mut saved = None;
            if stats[c].count == 0 {
                let last = stats.len() - 1;
                stats.swap_remove(c);
                factors.swap_remove(c);
                if c != last {
                    for a in assignments.iter_mut() {
                        if *a == last {
                            *a = c;
                        }
                    }
                }
            } else if !config.prior_only {
                let fresh = PredictiveFactor::new(&prior_precision, &stats[c])?;
                saved = Some(std::mem::replace(&mut factors[c], fresh));
            }

            log_weights.clear();
            for (s, f) in stats.iter().zip(&factors) {
                let lik = if config.prior_only { 0.0 } else { f.log_predictive(&u, obs, i) };
                log_weights.push((s.count as f64).ln() + lik);
            }
            let new_lik = if config.prior_only {
                0.0
            } else {
                let var = base.sigma2_beta * beta_part[i] + base.sigma2_eta * eta_part[i] + obs.d()[i];
                normal_log_pdf(obs.z()[i], 0.0, var)
            };
            log_weights.push(alpha.ln() + new_lik);
            let choice = sample_log_weights(&log_weights, &mut rng);

            if choice == stats.len() {
                let mut s = empty.clone();
                if config.prior_only {
                    s.count = 1;
                } else {
                    s.add(&u, obs, i);
                }
                factors.push(PredictiveFactor::new(&prior_precision, &s)?);
                stats.push(s);
            } else {
                if config.prior_only {
                    stats[choice].count += 1;
                } else {
                    stats[choice].add(&u, obs, i);
                    match (choice == c, saved) {
                        (true, Some(old)) => factors[choice] = old,
                        _ => factors[choice] = PredictiveFactor::new(&prior_precision, &stats[choice])?,
                    }
                }
            }
            assignments[i] = choice;
        }

        // (2) cluster coefficients from their posteriors
        thetas = factors.iter().map(|f| f.sample(&mut rng)).collect();
        let k = thetas.len();

        // (3) σ²_η, (4) α
        let refs: Vec<&DVector<f64>> = thetas.iter().collect();
        base.sigma2_eta = sample_sigma2_eta(config, &base, &refs, &mut rng)?;
        if config.fixed_alpha.is_none() {
            alpha = update_alpha_escobar_west(k, n, alpha, config.a_alpha, config.b_alpha, &mut rng);
        }

        let y = DVector::from_fn(n, |i, _| u.row(i).dot(&thetas[assignments[i]].transpose()));
        check_iteration(t, &y, alpha, base.sigma2_eta)?;
        rec.observe_clusters(t, k);
        if config.mcmc.keeps(t) {
            rec.record(&y, &assignments, k, alpha, base.sigma2_eta);
        }
    }
    Ok(rec.finish())
}

/// Blocked Gibbs sampler under the stick-breaking prior truncated at `m`.
pub fn fit_msmm_truncated(
    obs: &Observations,
    x: &DMatrix<f64>,
    basis: &MoranBasis,
    m: usize,
    config: &MixtureConfig,
) -> Result<MixturePosterior> {
    if m < 2 {
        return Err(Error::Config(format!("truncation level must be at least 2, got {m}")));
    }
    config.validate()?;
    let n = obs.len();
    let u = combined_design(x, basis)?;
    if u.nrows() != n {
        return Err(Error::Shape(format!("{n} observations, design has {} rows", u.nrows())));
    }
    let q = u.ncols();
    let mut rng = rng_from_seed(config.mcmc.seed);
    let mut base = BaseMeasure::new(x.ncols(), config.sigma2_beta, config.fixed_sigma2_eta.unwrap_or(1.0), basis)?;
    let mut alpha = config.initial_alpha();
    let mut assignments = config.initial_assignments(n, m);
    let mut atoms: Vec<DVector<f64>> = vec![DVector::zeros(q); m];
    let mut rec = Recorder::new("msmm-truncated", config, n);
    let mut log_weights = vec![0.0; m];

    for t in 1..=config.mcmc.iterations {
        let mut stats: Vec<SuffStats> = vec![SuffStats::new(q); m];
        for i in 0..n {
            let c = assignments[i];
            if config.prior_only {
                stats[c].count += 1;
            } else {
                stats[c].add(&u, obs, i);
            }
        }

        // sticks V_1..V_{M−1}
        let mut tail = n - stats[0].count;
        let mut sticks = Vec::with_capacity(m - 1);
        for k in 0..m - 1 {
            let beta = Beta::new(1.0 + stats[k].count as f64, alpha + tail as f64).expect("positive parameters");
            sticks.push(beta.sample(&mut rng).clamp(f64::EPSILON, 1.0 - f64::EPSILON));
            tail -= stats[k + 1].count;
        }
        let pi = stick_break(&sticks)?;

        // occupied atoms from their posteriors
        let prior_precision = base.precision();
        for k in 0..m {
            if stats[k].count > 0 {
                atoms[k] = PredictiveFactor::new(&prior_precision, &stats[k])
                    .map_err(|e| Error::Divergence { iteration: t, what: e.to_string() })?
                    .sample(&mut rng);
            }
        }
        let occupied: Vec<&DVector<f64>> = (0..m).filter(|&k| stats[k].count > 0).map(|k| &atoms[k]).collect();
        base.sigma2_eta = sample_sigma2_eta(config, &base, &occupied, &mut rng)?;
        if config.fixed_alpha.is_none() {
            let rate = config.b_alpha - sticks.iter().map(|v| (1.0 - v).ln()).sum::<f64>();
            alpha = sample_gamma_rate(config.a_alpha + (m - 1) as f64, rate, &mut rng).max(f64::MIN_POSITIVE);
        }
        // empty atoms from the base measure at the updated σ²_η
        let prior = Gaussian::from_canonical(base.precision(), &DVector::zeros(q))?;
        for k in 0..m {
            if stats[k].count == 0 {
                atoms[k] = prior.sample(&mut rng);
            }
        }

        // assignments
        let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
        for i in 0..n {
            for k in 0..m {
                log_weights[k] = log_pi[k]
                    + if config.prior_only {
                        0.0
                    } else {
                        let mean = u.row(i).dot(&atoms[k].transpose());
                        normal_log_pdf(obs.z()[i], mean, obs.d()[i])
                    };
            }
            assignments[i] = sample_log_weights(&log_weights, &mut rng);
        }

        let y = DVector::from_fn(n, |i, _| u.row(i).dot(&atoms[assignments[i]].transpose()));
        check_iteration(t, &y, alpha, base.sigma2_eta)?;
        let mut used = vec![false; m];
        assignments.iter().for_each(|&a| used[a] = true);
        let k_now = used.iter().filter(|u| **u).count();
        rec.observe_clusters(t, k_now);
        if config.mcmc.keeps(t) {
            rec.record(&y, &assignments, k_now, alpha, base.sigma2_eta);
        }
    }
    Ok(rec.finish())
}
