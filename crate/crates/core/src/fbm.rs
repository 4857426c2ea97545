//! Fourier-domain operators of isotropic 2-D fractional Brownian motion.
//!
//! Every operator is a real, radially symmetric Fourier multiplier `|w|^{2s}`
//! with the zero mode removed. Frequencies follow `w_j = 2 pi k_j / N` for
//! `k in [-N/2, N/2)`. The scale is unit: the covariance multiplier is exactly
//! `|w|^{-2(H+1)}`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{AmvError, Result};
use crate::model::{DisplacementField, PixelGrid};
use crate::wavelet::{WaveletBasis, WaveletFamily};

/// Which square root of the covariance to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtSign {
    /// `Sigma^{1/2}`
    Plus,
    /// `Sigma^{-1/2}`
    Minus,
}

/// Forward/inverse 2-D FFT plans for one grid.
#[derive(Clone)]
pub struct Spectral2d {
    grid: PixelGrid,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    omega2: Vec<f64>,
}

impl std::fmt::Debug for Spectral2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral2d")
            .field("grid", &self.grid)
            .finish()
    }
}

fn frequency(i: usize, n: usize) -> f64 {
    let k = if i < n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    std::f64::consts::TAU * k / n as f64
}

impl Spectral2d {
    pub fn new(grid: PixelGrid) -> Self {
        let mut planner = FftPlanner::new();
        let (rows, cols) = (grid.rows(), grid.cols());
        let mut omega2 = vec![0.0; grid.len()];
        for r in 0..rows {
            let wy = frequency(r, rows);
            for c in 0..cols {
                let wx = frequency(c, cols);
                omega2[grid.index(r, c)] = wx * wx + wy * wy;
            }
        }
        Self {
            grid,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
            omega2,
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    /// Squared frequency magnitude `|w|^2` per Fourier index (row-major).
    pub fn omega_squared(&self) -> &[f64] {
        &self.omega2
    }

    fn transform(&self, buf: &mut [Complex64], forward: bool) {
        let (rows, cols) = (self.grid.rows(), self.grid.cols());
        let (rp, cp) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        rp.process(buf);
        let mut col = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = buf[r * cols + c];
            }
            cp.process(&mut col);
            for r in 0..rows {
                buf[r * cols + c] = col[r];
            }
        }
    }

    /// Real field in, real field out: `F^{-1} diag(mult) F`.
    pub fn apply_multiplier(&self, field: &[f64], mult: &[f64]) -> Vec<f64> {
        let m = self.grid.len();
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, true);
        for (b, w) in buf.iter_mut().zip(mult) {
            *b *= *w;
        }
        self.transform(&mut buf, false);
        let scale = 1.0 / m as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// Table of `|w|^{2s}` with the zero mode set to 0.
    pub fn power_table(&self, s: f64) -> Vec<f64> {
        self.omega2
            .iter()
            .enumerate()
            .map(|(i, &w2)| if i == 0 { 0.0 } else { w2.powf(s) })
            .collect()
    }
}

/// `F^{-1} |w|^{2s} F` on one field (zero mode removed).
pub fn fractional_apply(field: &[f64], s: f64, grid: PixelGrid) -> Result<Vec<f64>> {
    if field.len() != grid.len() {
        return Err(AmvError::DimensionMismatch {
            expected: grid.len(),
            actual: field.len(),
        });
    }
    let sp = Spectral2d::new(grid);
    Ok(sp.apply_multiplier(field, &sp.power_table(s)))
}

/// Precomputed fBm covariance, precision and square-root multipliers.
#[derive(Debug, Clone)]
pub struct FbmOperator {
    spectral: Spectral2d,
    hurst: f64,
    cov: Vec<f64>,
    prec: Vec<f64>,
    sqrt_cov: Vec<f64>,
    sqrt_prec: Vec<f64>,
}

impl FbmOperator {
    pub fn new(grid: PixelGrid, hurst: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst.is_finite()) {
            return Err(AmvError::InvalidParameter(format!(
                "Hurst exponent must be > 0, got {hurst}"
            )));
        }
        let spectral = Spectral2d::new(grid);
        let e = hurst + 1.0;
        Ok(Self {
            cov: spectral.power_table(-e),
            prec: spectral.power_table(e),
            sqrt_cov: spectral.power_table(-e / 2.0),
            sqrt_prec: spectral.power_table(e / 2.0),
            spectral,
            hurst,
        })
    }

    pub fn grid(&self) -> PixelGrid {
        self.spectral.grid
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// Covariance multiplier table `|w|^{-2(H+1)}`.
    pub fn covariance_multiplier(&self) -> &[f64] {
        &self.cov
    }

    pub fn cov(&self, field: &[f64]) -> Vec<f64> {
        self.spectral.apply_multiplier(field, &self.cov)
    }

    pub fn prec(&self, field: &[f64]) -> Vec<f64> {
        self.spectral.apply_multiplier(field, &self.prec)
    }

    pub fn sqrt(&self, field: &[f64], sign: SqrtSign) -> Vec<f64> {
        match sign {
            SqrtSign::Plus => self.spectral.apply_multiplier(field, &self.sqrt_cov),
            SqrtSign::Minus => self.spectral.apply_multiplier(field, &self.sqrt_prec),
        }
    }

    /// `f^T P f` through Parseval, without an inverse transform.
    pub fn prec_quadratic(&self, field: &[f64]) -> f64 {
        let p = self.prec(field);
        p.iter().zip(field).map(|(a, b)| a * b).sum()
    }

    /// Field with covariance `Sigma_H` from white wavelet coefficients.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, basis: &WaveletBasis) -> Result<Vec<f64>> {
        let grid = self.grid();
        let mut a: Vec<f64> = (0..grid.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        basis.inverse(grid, &mut a)?;
        Ok(self.sqrt(&a, SqrtSign::Plus))
    }
}

fn map_components(d: &DisplacementField, f: impl Fn(&[f64]) -> Vec<f64>) -> DisplacementField {
    let v1 = f(d.d1());
    let v2 = f(d.d2());
    DisplacementField::from_components(d.grid(), &v1, &v2).expect("multiplier output is finite")
}

/// `P d` component-wise, with `P` the fBm precision of exponent `H`.
pub fn fbm_prec_apply(d: &DisplacementField, hurst: f64) -> Result<DisplacementField> {
    let op = FbmOperator::new(d.grid(), hurst)?;
    Ok(map_components(d, |f| op.prec(f)))
}

/// `Sigma_H d` component-wise.
pub fn fbm_cov_apply(d: &DisplacementField, hurst: f64) -> Result<DisplacementField> {
    let op = FbmOperator::new(d.grid(), hurst)?;
    Ok(map_components(d, |f| op.cov(f)))
}

pub fn fbm_sqrt_apply(
    field: &[f64],
    hurst: f64,
    sign: SqrtSign,
    grid: PixelGrid,
) -> Result<Vec<f64>> {
    if field.len() != grid.len() {
        return Err(AmvError::DimensionMismatch {
            expected: grid.len(),
            actual: field.len(),
        });
    }
    Ok(FbmOperator::new(grid, hurst)?.sqrt(field, sign))
}

/// One fBm draw using the default Coiflet basis for the grid.
pub fn fbm_sample<R: Rng + ?Sized>(rng: &mut R, hurst: f64, grid: PixelGrid) -> Result<Vec<f64>> {
    let basis = WaveletBasis::for_grid(WaveletFamily::Coiflet5, grid);
    FbmOperator::new(grid, hurst)?.sample(rng, &basis)
}
