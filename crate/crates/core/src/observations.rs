//! Log-scale data with known sampling variances, as consumed by the samplers.

use nalgebra::DVector;

use crate::tabulation::LogTable;
use crate::{Error, Result};

/// Log-scale estimates `z` with strictly positive known variances `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    z: DVector<f64>,
    d: DVector<f64>,
}

impl Observations {
    pub fn new(z: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        if z.len() != d.len() {
            return Err(Error::Shape(format!("{} estimates but {} variances", z.len(), d.len())));
        }
        if z.is_empty() {
            return Err(Error::EmptyInput("no observations".into()));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("estimate {i} is not finite")));
        }
        if let Some(i) = d.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("variance {i} must be positive and finite, got {}", d[i])));
        }
        Ok(Self {
            z: DVector::from_vec(z),
            d: DVector::from_vec(d),
        })
    }

    /// Requires every variance to be defined (run GVF imputation first).
    pub fn from_log_table(table: &LogTable) -> Result<Self> {
        Self::new(table.z.clone(), table.variances()?)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn with_z(&self, z: Vec<f64>) -> Result<Self> {
        Self::new(z, self.d.as_slice().to_vec())
    }

    pub(crate) fn precisions(&self) -> DVector<f64> {
        self.d.map(|v| 1.0 / v)
    }
}
