//! Gibbs sampler for the single-field multivariate spatial mixed effects
//! model
//!
//! ```text
//! z = y + ε,          ε ~ N(0, Δ),  Δ = diag(d) known
//! y = Xβ + Ψη
//! β ~ N(0, σ²_β I),   η ~ N(0, σ²_η K),   σ²_η ~ IG(a, b)
//! ```
//!
//! Each sweep draws β | η, then η | β, σ²_η, then σ²_η | η.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::gaussian::{Gaussian, InverseGamma};
use crate::moran::MoranBasis;
use crate::observations::Observations;
use crate::posterior::{McmcSettings, PosteriorDraws};
use crate::seed::rng_from_seed;
use crate::{Error, Result};

pub use crate::posterior::{predict_summaries, LatentSummary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsmConfig {
    /// Prior variance of each fixed effect.
    pub sigma2_beta: f64,
    /// Inverse-gamma shape for σ²_η.
    pub a_eta: f64,
    /// Inverse-gamma scale for σ²_η.
    pub b_eta: f64,
    pub mcmc: McmcSettings,
    /// Holds σ²_η at this value instead of sampling it.
    pub fixed_sigma2_eta: Option<f64>,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            sigma2_beta: 100.0,
            a_eta: 0.1,
            b_eta: 0.1,
            mcmc: McmcSettings::default(),
            fixed_sigma2_eta: None,
        }
    }
}

impl MsmConfig {
    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        for (name, v) in [("sigma2_beta", self.sigma2_beta), ("a_eta", self.a_eta), ("b_eta", self.b_eta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(v) = self.fixed_sigma2_eta {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("fixed sigma2_eta must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsmState {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub sigma2_eta: f64,
}

impl MsmState {
    /// Prior means for the coefficients and σ²_η = 1.
    pub fn initial(p: usize, r: usize) -> Self {
        Self {
            beta: DVector::zeros(p),
            eta: DVector::zeros(r),
            sigma2_eta: 1.0,
        }
    }
}

fn check_dims(obs: &Observations, x: &DMatrix<f64>, psi: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != obs.len() || psi.nrows() != obs.len() {
        return Err(Error::Shape(format!(
            "{} observations, design has {} rows, basis has {} rows",
            obs.len(),
            x.nrows(),
            psi.nrows()
        )));
    }
    Ok(())
}

/// `Mᵀ Δ⁻¹ N`.
fn weighted_cross(m: &DMatrix<f64>, w: &DVector<f64>, n: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = n.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    m.transpose() * scaled
}

/// β | η: precision `XᵀΔ⁻¹X + I/σ²_β`, linear term `XᵀΔ⁻¹(z − Ψη)`.
pub fn conditional_beta(
    state: &MsmState,
    obs: &Observations,
    x: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    sigma2_beta: f64,
) -> Result<Gaussian> {
    check_dims(obs, x, psi)?;
    let w = obs.precisions();
    let resid = obs.z() - psi * &state.eta;
    let mut precision = weighted_cross(x, &w, x);
    for j in 0..x.ncols() {
        precision[(j, j)] += 1.0 / sigma2_beta;
    }
    let linear = x.transpose() * resid.component_mul(&w);
    Gaussian::from_canonical(precision, &linear)
}

/// η | β, σ²_η: precision `ΨᵀΔ⁻¹Ψ + K⁻¹/σ²_η`, linear term `ΨᵀΔ⁻¹(z − Xβ)`.
pub fn conditional_eta(
    state: &MsmState,
    obs: &Observations,
    x: &DMatrix<f64>,
    basis: &MoranBasis,
    sigma2_eta: f64,
) -> Result<Gaussian> {
    let psi = &basis.psi;
    check_dims(obs, x, psi)?;
    let w = obs.precisions();
    let resid = obs.z() - x * &state.beta;
    let precision = weighted_cross(psi, &w, psi) + &basis.k_inv / sigma2_eta;
    let linear = psi.transpose() * resid.component_mul(&w);
    Gaussian::from_canonical(precision, &linear)
}

/// σ²_η | η ~ IG(a + r/2, b + ηᵀK⁻¹η/2).
pub fn conditional_sigma2_eta(eta: &DVector<f64>, k_inv: &DMatrix<f64>, a_eta: f64, b_eta: f64) -> Result<InverseGamma> {
    let quad = if eta.is_empty() { 0.0 } else { (eta.transpose() * k_inv * eta)[(0, 0)] };
    InverseGamma::new(a_eta + eta.len() as f64 / 2.0, b_eta + 0.5 * quad)
}

/// Quantities of the full conditionals that do not change across sweeps.
struct Precomputed {
    xtwx: DMatrix<f64>,
    xtwz: DVector<f64>,
    xtwpsi: DMatrix<f64>,
    ptwp: DMatrix<f64>,
    ptwz: DVector<f64>,
}

impl Precomputed {
    fn new(obs: &Observations, x: &DMatrix<f64>, psi: &DMatrix<f64>) -> Self {
        let w = obs.precisions();
        let wz = obs.z().component_mul(&w);
        Self {
            xtwx: weighted_cross(x, &w, x),
            xtwz: x.transpose() * &wz,
            xtwpsi: weighted_cross(x, &w, psi),
            ptwp: weighted_cross(psi, &w, psi),
            ptwz: psi.transpose() * &wz,
        }
    }
}

/// Runs one chain. Retained draws store `beta[j]`, `eta[j]`, `sigma2_eta`
/// and the latent `y = Xβ + Ψη`.
pub fn fit_msm(obs: &Observations, x: &DMatrix<f64>, basis: &MoranBasis, config: &MsmConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    check_dims(obs, x, &basis.psi)?;
    let psi = &basis.psi;
    let (p, r) = (x.ncols(), psi.ncols());
    let pre = Precomputed::new(obs, x, psi);
    let mut beta_precision = pre.xtwx.clone();
    for j in 0..p {
        beta_precision[(j, j)] += 1.0 / config.sigma2_beta;
    }
    let mut rng = rng_from_seed(config.mcmc.seed);
    let mut state = MsmState::initial(p, r);
    if let Some(s) = config.fixed_sigma2_eta {
        state.sigma2_eta = s;
    }
    let mut draws = PosteriorDraws::new("msm", config.mcmc.seed, obs.len());

    for t in 1..=config.mcmc.iterations {
        let linear = &pre.xtwz - &pre.xtwpsi * &state.eta;
        state.beta = Gaussian::from_canonical(beta_precision.clone(), &linear)?.sample(&mut rng);

        let precision = &pre.ptwp + &basis.k_inv / state.sigma2_eta;
        let linear = &pre.ptwz - pre.xtwpsi.transpose() * &state.beta;
        state.eta = Gaussian::from_canonical(precision, &linear)
            .map_err(|e| diverged(t, e))?
            .sample(&mut rng);

        if config.fixed_sigma2_eta.is_none() {
            state.sigma2_eta = conditional_sigma2_eta(&state.eta, &basis.k_inv, config.a_eta, config.b_eta)
                .map_err(|e| diverged(t, e))?
                .sample(&mut rng);
        }
        check_finite(t, &state)?;

        if config.mcmc.keeps(t) {
            record(&mut draws, &state, x, psi);
        }
    }
    Ok(draws)
}

fn diverged(iteration: usize, e: Error) -> Error {
    Error::Divergence {
        iteration,
        what: e.to_string(),
    }
}

fn check_finite(iteration: usize, state: &MsmState) -> Result<()> {
    let ok = state.beta.iter().chain(state.eta.iter()).all(|v| v.is_finite())
        && state.sigma2_eta.is_finite()
        && state.sigma2_eta > 0.0;
    if ok {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            what: "non-finite parameter draw".into(),
        })
    }
}

fn record(draws: &mut PosteriorDraws, state: &MsmState, x: &DMatrix<f64>, psi: &DMatrix<f64>) {
    let y = x * &state.beta + psi * &state.eta;
    draws.latent.push(y.as_slice());
    draws.push_vector("beta", state.beta.as_slice());
    draws.push_vector("eta", state.eta.as_slice());
    draws.push_scalar("sigma2_eta", state.sigma2_eta);
}

/// Draws `y = Xβ + Ψη` with `η ~ N(0, σ²_η K)` for a given β.
pub fn simulate_latent<R: Rng + ?Sized>(x: &DMatrix<f64>, basis: &MoranBasis, beta: &DVector<f64>, sigma2_eta: f64, rng: &mut R) -> Result<DVector<f64>> {
    let eta = Gaussian::from_canonical(&basis.k_inv / sigma2_eta, &DVector::zeros(basis.rank()))?.sample(rng);
    Ok(x * beta + &basis.psi * eta)
}
