use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{AmvError, Result};
use crate::fbm::{FbmOperator, SqrtSign};
use crate::model::PixelGrid;

/// Proposal covariance `Sigma` with a factor `S`, `S S^T = Sigma`.
///
/// `apply_inv_sqrt` is `S^{-T}`, so `Sigma S^{-T} z = S z`; momenta drawn as
/// `S^{-T} z` have covariance `Sigma^{-1}`. Singular covariances use pseudo-inverses.
pub trait Preconditioner: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn apply_inverse(&self, v: &[f64]) -> Vec<f64>;
    fn apply_sqrt(&self, v: &[f64]) -> Vec<f64>;
    fn apply_inv_sqrt(&self, v: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub dim: usize,
}

impl Preconditioner for Identity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn apply_sqrt(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn apply_inv_sqrt(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

/// Dense covariance with a Cholesky factor.
#[derive(Debug, Clone)]
pub struct DenseCov {
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl DenseCov {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
            AmvError::InvalidParameter("covariance is not positive definite".into())
        })?;
        Ok(Self { cov, chol })
    }
}

impl Preconditioner for DenseCov {
    fn dim(&self) -> usize {
        self.cov.nrows()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.cov * DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        self.chol
            .solve(&DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    fn apply_sqrt(&self, v: &[f64]) -> Vec<f64> {
        (self.chol.l() * DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    fn apply_inv_sqrt(&self, v: &[f64]) -> Vec<f64> {
        let lt = self.chol.l().transpose();
        lt.solve_upper_triangular(&DVector::from_column_slice(v))
            .expect("nonsingular factor")
            .as_slice()
            .to_vec()
    }
}

/// fBm covariance on both displacement blocks, identity on the image blocks.
#[derive(Debug, Clone)]
pub struct FbmPrecond {
    op: FbmOperator,
    channels: usize,
}

impl FbmPrecond {
    pub fn new(grid: PixelGrid, channels: usize, hurst: f64) -> Result<Self> {
        Ok(Self {
            op: FbmOperator::new(grid, hurst)?,
            channels,
        })
    }

    fn blockwise(&self, v: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let m = self.op.grid().len();
        let mut out = Vec::with_capacity(v.len());
        out.extend(f(&v[..m]));
        out.extend(f(&v[m..2 * m]));
        out.extend_from_slice(&v[2 * m..]);
        out
    }
}

impl Preconditioner for FbmPrecond {
    fn dim(&self) -> usize {
        (2 + self.channels) * self.op.grid().len()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b| self.op.cov(b))
    }

    fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b| self.op.prec(b))
    }

    fn apply_sqrt(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b| self.op.sqrt(b, SqrtSign::Plus))
    }

    fn apply_inv_sqrt(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, |b| self.op.sqrt(b, SqrtSign::Minus))
    }
}
