//! Gaussian and inverse-gamma full conditionals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::{Error, Result};

/// Multivariate normal held in canonical form: the Cholesky factor of the
/// precision plus the mean.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    precision_factor: DMatrix<f64>,
}

impl Gaussian {
    /// Builds `N(P⁻¹ h, P⁻¹)` from a precision `P` and linear term `h`.
    pub fn from_canonical(precision: DMatrix<f64>, linear: &DVector<f64>) -> Result<Self> {
        let dim = precision.nrows();
        if precision.ncols() != dim || linear.len() != dim {
            return Err(Error::Shape(format!(
                "precision {}x{} vs linear term {}",
                precision.nrows(),
                precision.ncols(),
                linear.len()
            )));
        }
        if dim == 0 {
            return Ok(Self {
                mean: DVector::zeros(0),
                precision_factor: DMatrix::zeros(0, 0),
            });
        }
        let chol = precision
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("conditional precision".into()))?;
        let mean = chol.solve(linear);
        Ok(Self {
            mean,
            precision_factor: chol.unpack(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Lower Cholesky factor `L` of the precision, `P = L Lᵀ`.
    pub fn precision_factor(&self) -> &DMatrix<f64> {
        &self.precision_factor
    }

    pub fn precision(&self) -> DMatrix<f64> {
        &self.precision_factor * self.precision_factor.transpose()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let dim = self.dim();
        if dim == 0 {
            return DMatrix::zeros(0, 0);
        }
        let linv = self
            .precision_factor
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .expect("Cholesky factor has a positive diagonal");
        linv.transpose() * linv
    }

    /// Draws `mean + L⁻ᵀ ε` with `ε ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let dim = self.dim();
        if dim == 0 {
            return DVector::zeros(0);
        }
        let eps = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let offset = self
            .precision_factor
            .tr_solve_lower_triangular(&eps)
            .expect("Cholesky factor has a positive diagonal");
        &self.mean + offset
    }
}

/// Inverse gamma with density ∝ x^{-(shape+1)} exp(-scale / x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
            return Err(Error::Domain(format!(
                "inverse gamma needs positive shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(Self { shape, scale })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // 1/X with X ~ Gamma(shape, rate = scale)
        let gamma = Gamma::new(self.shape, 1.0 / self.scale).expect("validated parameters");
        1.0 / gamma.sample(rng)
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }
}

/// Gamma draw in the shape/rate parameterization.
pub(crate) fn sample_gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive and finite")
        .sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use approx::assert_relative_eq;

    #[test]
    fn canonical_mean_and_covariance() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = DVector::from_vec(vec![1.0, -1.0]);
        let g = Gaussian::from_canonical(p.clone(), &h).unwrap();
        let cov = p.clone().try_inverse().unwrap();
        assert_relative_eq!(g.covariance(), cov, epsilon = 1e-12);
        assert_relative_eq!(g.mean().clone(), &cov * &h, epsilon = 1e-12);
        assert_relative_eq!(g.precision(), p, epsilon = 1e-12);
    }

    #[test]
    fn sample_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let g = Gaussian::from_canonical(p.clone(), &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let mut rng = rng_from_seed(3);
        let n = 200_000;
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = g.sample(&mut rng) - g.mean();
            sum += &x;
            outer += &x * x.transpose();
        }
        let cov = outer / n as f64;
        assert!((sum / n as f64).amax() < 0.01);
        assert_relative_eq!(cov, g.covariance(), epsilon = 0.01);
    }

    #[test]
    fn empty_gaussian() {
        let g = Gaussian::from_canonical(DMatrix::zeros(0, 0), &DVector::zeros(0)).unwrap();
        assert_eq!(g.sample(&mut rng_from_seed(1)).len(), 0);
    }

    #[test]
    fn inverse_gamma_mean() {
        let ig = InverseGamma::new(5.0, 8.0).unwrap();
        let mut rng = rng_from_seed(9);
        let n = 100_000;
        let m: f64 = (0..n).map(|_| ig.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - 2.0).abs() < 0.03, "{m}");
        assert!(InverseGamma::new(0.0, 1.0).is_err());
    }
}
