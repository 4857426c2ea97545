use nalgebra::{DMatrix, DVector};

use crate::energy::Target;
use crate::error::{AmvError, Result};

/// `U(theta) = (theta - mu)' A (theta - mu) / 2 + c` for symmetric positive definite `A`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    precision: DMatrix<f64>,
    mean: DVector<f64>,
}

impl GaussianTarget {
    pub fn new(precision: DMatrix<f64>, mean: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if precision.nrows() != n || precision.ncols() != n {
            return Err(AmvError::DimensionMismatch {
                expected: n,
                actual: precision.nrows(),
            });
        }
        Ok(Self {
            precision,
            mean: DVector::from_vec(mean),
        })
    }

    /// Target with covariance `cov`.
    pub fn from_covariance(cov: DMatrix<f64>, mean: Vec<f64>) -> Result<Self> {
        let inv = cov
            .try_inverse()
            .ok_or_else(|| AmvError::InvalidParameter("singular covariance".into()))?;
        Self::new((&inv + inv.transpose()) * 0.5, mean)
    }

    pub fn isotropic(n: usize, variance: f64) -> Self {
        Self {
            precision: DMatrix::identity(n, n) / variance,
            mean: DVector::zeros(n),
        }
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        let r = DVector::from_column_slice(theta) - &self.mean;
        0.5 * r.dot(&(&self.precision * &r))
    }

    fn energy_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let r = DVector::from_column_slice(theta) - &self.mean;
        let g = &self.precision * &r;
        (0.5 * r.dot(&g), g.as_slice().to_vec())
    }
}
