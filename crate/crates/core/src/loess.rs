//! Local linear regression with tricube weights.

use crate::{Error, Result};

/// Smallest training set accepted by [`Loess::fit`].
pub const MIN_POINTS: usize = 5;

/// A degree-1 LOESS smoother. Fitting only validates and stores the data;
/// each prediction solves its own weighted least-squares problem.
#[derive(Debug, Clone)]
pub struct Loess {
    x: Vec<f64>,
    y: Vec<f64>,
    span: f64,
    min_x: f64,
    max_x: f64,
}

impl Loess {
    pub fn fit(x: &[f64], y: &[f64], span: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("x has {} points, y has {}", x.len(), y.len())));
        }
        if x.len() < MIN_POINTS {
            return Err(Error::InsufficientData(format!(
                "LOESS needs at least {MIN_POINTS} points, got {}",
                x.len()
            )));
        }
        if !(span > 0.0 && span <= 1.0) {
            return Err(Error::Domain(format!("span must lie in (0, 1], got {span}")));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Domain("LOESS inputs must be finite".into()));
        }
        let min_x = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max_x = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            span,
            min_x,
            max_x,
        })
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    /// Number of neighbours in each local fit.
    fn neighbourhood(&self) -> usize {
        let n = self.x.len();
        ((self.span * n as f64).ceil() as usize).clamp(2, n)
    }

    /// Tricube weights for a fit centred at `x0`.
    pub fn weights(&self, x0: f64) -> Vec<f64> {
        let mut dist: Vec<f64> = self.x.iter().map(|xi| (xi - x0).abs()).collect();
        let mut sorted = dist.clone();
        sorted.sort_by(f64::total_cmp);
        let h = sorted[self.neighbourhood() - 1];
        for d in dist.iter_mut() {
            *d = if h <= 0.0 {
                if *d <= 0.0 { 1.0 } else { 0.0 }
            } else {
                let u = *d / h;
                if u < 1.0 { (1.0 - u.powi(3)).powi(3) } else { 0.0 }
            };
        }
        dist
    }

    /// Prediction at `x0`, clamped to the training range.
    pub fn predict(&self, x0: f64) -> f64 {
        let x0 = x0.clamp(self.min_x, self.max_x);
        let w = self.weights(x0);
        let sw: f64 = w.iter().sum();
        let xbar = w.iter().zip(&self.x).map(|(w, x)| w * x).sum::<f64>() / sw;
        let ybar = w.iter().zip(&self.y).map(|(w, y)| w * y).sum::<f64>() / sw;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for ((wi, xi), yi) in w.iter().zip(&self.x).zip(&self.y) {
            let dx = xi - xbar;
            sxx += wi * dx * dx;
            sxy += wi * dx * (yi - ybar);
        }
        // all weight on a single abscissa: the local line is undetermined
        let scale = w.iter().zip(&self.x).map(|(w, x)| w * x * x).sum::<f64>() / sw;
        if sxx <= 1e-12 * scale.max(f64::MIN_POSITIVE) * sw {
            return ybar;
        }
        ybar + sxy / sxx * (x0 - xbar)
    }

    pub fn predict_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.predict(x)).collect()
    }
}
