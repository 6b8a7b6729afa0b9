//! Bayesian Fay-Herriot baseline: independent random effects per entry,
//!
//! ```text
//! z_i = x_iᵀβ + ν_i + ε_i,   ν_i ~ N(0, σ²),   ε_i ~ N(0, d_i)
//! β ~ N(0, σ²_β I),   σ² ~ IG(a, b)
//! ```
//!
//! Each sweep draws ν | β, σ², then β | ν, then σ² | ν.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::gaussian::{Gaussian, InverseGamma};
use crate::observations::Observations;
use crate::posterior::{McmcSettings, PosteriorDraws};
use crate::seed::rng_from_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhConfig {
    pub sigma2_beta: f64,
    pub a: f64,
    pub b: f64,
    pub mcmc: McmcSettings,
    /// Holds σ² at this value instead of sampling it.
    pub fixed_sigma2: Option<f64>,
}

impl Default for FhConfig {
    fn default() -> Self {
        Self {
            sigma2_beta: 100.0,
            a: 0.1,
            b: 0.1,
            mcmc: McmcSettings::default(),
            fixed_sigma2: None,
        }
    }
}

impl FhConfig {
    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        for (name, v) in [("sigma2_beta", self.sigma2_beta), ("a", self.a), ("b", self.b)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if matches!(self.fixed_sigma2, Some(v) if !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("fixed sigma2 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhState {
    pub beta: DVector<f64>,
    pub nu: DVector<f64>,
    pub sigma2: f64,
}

/// ν_i | β, σ²: precision `1/d_i + 1/σ²`, mean `((z_i − x_iᵀβ)/d_i) / precision`,
/// i.e. the residual shrunk by `σ² / (σ² + d_i)`.
pub fn conditional_nu(residual: f64, d: f64, sigma2: f64) -> (f64, f64) {
    let precision = 1.0 / d + 1.0 / sigma2;
    (residual / d / precision, 1.0 / precision)
}

/// Runs one chain. Retained draws store `beta[j]`, `sigma2` and the latent
/// `y = Xβ + ν`; ν itself is `y − Xβ`.
pub fn fit_fh(obs: &Observations, x: &DMatrix<f64>, config: &FhConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let n = obs.len();
    if x.nrows() != n {
        return Err(Error::Shape(format!("{n} observations, design has {} rows", x.nrows())));
    }
    let p = x.ncols();
    let w = obs.precisions();
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut beta_precision = x.transpose() * &xw;
    for j in 0..p {
        beta_precision[(j, j)] += 1.0 / config.sigma2_beta;
    }
    let beta_factor = Gaussian::from_canonical(beta_precision, &DVector::zeros(p))?;

    let mut rng = rng_from_seed(config.mcmc.seed);
    let mut state = FhState {
        beta: DVector::zeros(p),
        nu: DVector::zeros(n),
        sigma2: config.fixed_sigma2.unwrap_or(1.0),
    };
    let mut draws = PosteriorDraws::new("fh", config.mcmc.seed, n);
    let z = obs.z();
    let d = obs.d();

    for t in 1..=config.mcmc.iterations {
        let fitted = x * &state.beta;
        for i in 0..n {
            let (mean, var) = conditional_nu(z[i] - fitted[i], d[i], state.sigma2);
            let e: f64 = StandardNormal.sample(&mut rng);
            state.nu[i] = mean + var.sqrt() * e;
        }

        let linear = xw.transpose() * (z - &state.nu);
        state.beta = sample_with_factor(&beta_factor, &linear, &mut rng);

        if config.fixed_sigma2.is_none() {
            state.sigma2 = InverseGamma::new(config.a + n as f64 / 2.0, config.b + 0.5 * state.nu.norm_squared())
                .map_err(|e| Error::Divergence { iteration: t, what: e.to_string() })?
                .sample(&mut rng);
        }
        if !(state.beta.iter().chain(state.nu.iter()).all(|v| v.is_finite()) && state.sigma2 > 0.0) {
            return Err(Error::Divergence {
                iteration: t,
                what: "non-finite parameter draw".into(),
            });
        }
        if config.mcmc.keeps(t) {
            let y = x * &state.beta + &state.nu;
            draws.latent.push(y.as_slice());
            draws.push_vector("beta", state.beta.as_slice());
            draws.push_scalar("sigma2", state.sigma2);
        }
    }
    Ok(draws)
}

/// Samples `N(P⁻¹h, P⁻¹)` reusing the Cholesky factor of a fixed precision.
fn sample_with_factor<R: rand::Rng + ?Sized>(fixed: &Gaussian, linear: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let l = fixed.precision_factor();
    if l.nrows() == 0 {
        return DVector::zeros(0);
    }
    let half = l.solve_lower_triangular(linear).expect("positive diagonal");
    let mean = l.tr_solve_lower_triangular(&half).expect("positive diagonal");
    let eps = DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(rng));
    mean + l.tr_solve_lower_triangular(&eps).expect("positive diagonal")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::predict_summaries;

    #[test]
    fn scalar_shrinkage_formula() {
        let (mean, var) = conditional_nu(2.0, 0.5, 1.5);
        assert!((mean - 2.0 * 1.5 / (1.5 + 0.5)).abs() < 1e-15);
        assert!((var - 1.0 / (1.0 / 0.5 + 1.0 / 1.5)).abs() < 1e-15);
        // huge sampling variance: no information about ν
        let (mean, _) = conditional_nu(2.0, 1e12, 1.0);
        assert!(mean.abs() < 1e-11);
    }

    #[test]
    fn uninformative_data_shrinks_nu_to_zero() {
        let n = 6;
        let obs = Observations::new(vec![4.0, -3.0, 2.0, 5.0, 0.0, 1.0], vec![1e10; n]).unwrap();
        let x = DMatrix::from_element(n, 1, 1.0);
        let config = FhConfig {
            mcmc: McmcSettings { iterations: 3000, burn_in: 500, thin: 1, seed: 3 },
            fixed_sigma2: Some(0.5),
            ..Default::default()
        };
        let draws = fit_fh(&obs, &x, &config).unwrap();
        let beta = draws.trace("beta[0]").unwrap();
        let mut nu_mean = vec![0.0; n];
        for (t, row) in draws.latent.rows().enumerate() {
            for i in 0..n {
                nu_mean[i] += (row[i] - beta[t]) / draws.retained() as f64;
            }
        }
        // posterior sd of ν is √0.5; 2500 nearly independent draws
        assert!(nu_mean.iter().all(|v| v.abs() < 0.06), "{nu_mean:?}");
    }

    #[test]
    fn seed_determinism() {
        let obs = Observations::new(vec![1.0, 2.0, 0.5, 3.0], vec![0.3; 4]).unwrap();
        let x = DMatrix::from_element(4, 1, 1.0);
        let config = FhConfig {
            mcmc: McmcSettings { iterations: 200, burn_in: 50, thin: 3, seed: 9 },
            ..Default::default()
        };
        let a = fit_fh(&obs, &x, &config).unwrap();
        assert_eq!(a, fit_fh(&obs, &x, &config).unwrap());
        assert_eq!(a.retained(), 50);
        assert!(a.trace("sigma2").unwrap().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn predictions_between_direct_and_synthetic() {
        // fixed σ², β essentially known: y_i = z_i·σ²/(σ²+d_i) + xβ·d_i/(σ²+d_i)
        let z = vec![3.0, -1.0, 0.5, 2.0, 1.0];
        let d = vec![0.2, 1.0, 0.5, 2.0, 0.1];
        let obs = Observations::new(z.clone(), d).unwrap();
        let x = DMatrix::from_element(5, 1, 1.0);
        let config = FhConfig {
            sigma2_beta: 100.0,
            mcmc: McmcSettings { iterations: 20_000, burn_in: 1000, thin: 1, seed: 21 },
            fixed_sigma2: Some(0.7),
            ..Default::default()
        };
        let draws = fit_fh(&obs, &x, &config).unwrap();
        let s = predict_summaries(&draws).unwrap();
        let beta = draws.trace("beta[0]").unwrap();
        let beta_hat = beta.iter().sum::<f64>() / beta.len() as f64;
        for i in 0..5 {
            let (lo, hi) = if z[i] < beta_hat { (z[i], beta_hat) } else { (beta_hat, z[i]) };
            assert!(s.mean[i] > lo - 0.02 && s.mean[i] < hi + 0.02, "{i}: {} not in [{lo}, {hi}]", s.mean[i]);
        }
    }
}
