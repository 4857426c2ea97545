//! Hessian of the Gibbs energy and the local Gaussian (Laplace) expected-error bound.
//!
//! The Hessian is never formed analytically entry by entry. [`HessianOperator`]
//! applies `H v` in `O(m log m)` from the same warp derivatives used by the
//! gradient, and [`assemble_hessian`] probes it column by column into CSR storage.
//! Per-pixel bounds then come from the Hessian restricted to a disk around the
//! pixel, which treats outside components as conditionally fixed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{ModelParams, Posterior};
use crate::error::{AmvError, Result};
use crate::model::{ObservationSet, PixelGrid, StateVector};
use crate::spline::{self, ScatterWeights, DERIV_STEP};
use crate::uq::{ExpectedErrorMap, ObservableKind, ObservableSet};

/// Relative magnitude below which Hessian entries are dropped.
pub const DROP_TOLERANCE: f64 = 1e-8;

/// Default disk radius (pixels) of the reduced eigendecompositions.
pub const DEFAULT_RADIUS: f64 = 4.0;

/// `H v` at a fixed state.
pub struct HessianOperator<'a> {
    post: &'a Posterior,
    d: Vec<f64>,
    mask0: Vec<f64>,
    mask1: Vec<f64>,
    delta0: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
    h: [Vec<f64>; 3],
}

impl<'a> HessianOperator<'a> {
    pub fn new(post: &'a Posterior, theta: &[f64]) -> Result<Self> {
        let grid = post.grid();
        let m = grid.len();
        let k = post.channels();
        if theta.len() != (2 + k) * m {
            return Err(AmvError::DimensionMismatch {
                expected: (2 + k) * m,
                actual: theta.len(),
            });
        }
        let ev = post.evaluate(theta);
        let d = theta[..2 * m].to_vec();
        let (g1, g2) = spline::spatial_derivs(grid, k, &ev.coef, &d, DERIV_STEP);
        let h = spline::second_derivs(grid, k, &ev.coef, &d, DERIV_STEP);
        let mask = &post.observations().mask;
        let as_f = |b: &[bool]| {
            b.iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect::<Vec<f64>>()
        };
        Ok(Self {
            post,
            d,
            mask0: as_f(mask.t0()),
            mask1: as_f(mask.t1()),
            delta0: ev.delta.t0,
            g1,
            g2,
            h,
        })
    }

    pub fn dim(&self) -> usize {
        (2 + self.post.channels()) * self.post.grid().len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let grid = self.post.grid();
        let m = grid.len();
        let k = self.post.channels();
        let ModelParams {
            alpha, beta, gamma, ..
        } = *self.post.params();
        let (u1, rest) = v.split_at(m);
        let (u2, vx) = rest.split_at(m);

        let mut cv = vx.to_vec();
        spline::transform_stack(grid, &mut cv);
        let t = spline::warp_values(grid, k, &cv, &self.d);
        let (t1, t2) = spline::spatial_derivs(grid, k, &cv, &self.d, DERIV_STEP);

        let prior = self.post.prior_operator();
        let p1 = prior.prec(u1);
        let p2 = prior.prec(u2);
        let mut out = vec![0.0; v.len()];
        let mut lin = vec![0.0; k * m];
        let mut du1 = vec![0.0; k * m];
        let mut du2 = vec![0.0; k * m];
        for s in 0..m {
            let (mut a1, mut a2) = (0.0, 0.0);
            for ch in 0..k {
                let i = ch * m + s;
                let (g1, g2, r) = (self.g1[i], self.g2[i], self.delta0[i]);
                let a = self.mask0[s] * (g1 * u1[s] + g2 * u2[s] + t[i]);
                lin[i] = a;
                du1[i] = r * u1[s];
                du2[i] = r * u2[s];
                a1 += g1 * a + r * (self.h[0][i] * u1[s] + self.h[1][i] * u2[s] + t1[i]);
                a2 += g2 * a + r * (self.h[1][i] * u1[s] + self.h[2][i] * u2[s] + t2[i]);
            }
            out[s] = 2.0 * alpha * p1[s] + 2.0 * beta * a1;
            out[m + s] = 2.0 * alpha * p2[s] + 2.0 * beta * a2;
        }
        let mut back = spline::scatter(grid, k, &self.d, &lin, ScatterWeights::Value);
        let b1 = spline::scatter(grid, k, &self.d, &du1, ScatterWeights::Derivative(0));
        let b2 = spline::scatter(grid, k, &self.d, &du2, ScatterWeights::Derivative(1));
        for i in 0..k * m {
            back[i] += b1[i] + b2[i];
        }
        spline::transform_stack(grid, &mut back);
        for ch in 0..k {
            for s in 0..m {
                let i = ch * m + s;
                out[2 * m + i] =
                    2.0 * gamma * vx[i] + 2.0 * beta * (self.mask1[s] * vx[i] + back[i]);
            }
        }
        out
    }
}

/// Symmetric sparse matrix in CSR layout over the state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHessian {
    grid: PixelGrid,
    channels: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseHessian {
    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, a)| a * v[j]).sum()
            })
            .collect()
    }

    /// `max |H_ij - H_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim() {
            let (cols, vals) = self.row(i);
            for (&j, &a) in cols.iter().zip(vals) {
                worst = worst.max((a - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                a[(i, j)] = v;
            }
        }
        a
    }

    /// Dense principal submatrix on `indices`.
    pub fn restrict(&self, indices: &[usize]) -> DMatrix<f64> {
        let mut pos = std::collections::HashMap::with_capacity(indices.len());
        for (p, &i) in indices.iter().enumerate() {
            pos.insert(i, p);
        }
        let l = indices.len();
        let mut a = DMatrix::zeros(l, l);
        for (p, &i) in indices.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if let Some(&q) = pos.get(&j) {
                    a[(p, q)] = v;
                }
            }
        }
        a
    }
}

fn periodic_distance(grid: PixelGrid, a: usize, b: usize) -> f64 {
    let (ra, ca) = grid.position(a);
    let (rb, cb) = grid.position(b);
    let wrap = |x: usize, y: usize, n: usize| {
        let d = x.abs_diff(y);
        d.min(n - d) as f64
    };
    wrap(ra, rb, grid.rows()).hypot(wrap(ca, cb, grid.cols()))
}

/// Probe a symmetric linear operator column by column into a [`SparseHessian`].
///
/// Entry `(i, j)` is kept when `|H_ij| >= tol |H_jj|` and `|H_ji| >= tol |H_ii|`
/// (and, with a band radius, when the two pixels are close enough); the stored
/// value is the average of the two probes, so the result is exactly symmetric.
pub fn assemble_from_operator<F>(
    grid: PixelGrid,
    channels: usize,
    apply: F,
    band_radius: Option<f64>,
) -> Result<SparseHessian>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let m = grid.len();
    let n = (2 + channels) * m;
    let columns: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = apply(&e);
            let diag = col[j].abs();
            col.into_iter()
                .enumerate()
                .filter(|&(i, v)| {
                    v != 0.0
                        && v.abs() >= DROP_TOLERANCE * diag
                        && band_radius.is_none_or(|r| periodic_distance(grid, i % m, j % m) <= r)
                })
                .collect()
        })
        .collect();

    let mut worst = 0.0f64;
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    // row i of the result is built from column i (H symmetric), intersected with the transposed test
    for i in 0..n {
        for &(j, hji) in &columns[i] {
            if let Ok(p) = columns[j].binary_search_by_key(&i, |&(r, _)| r) {
                let hij = columns[j][p].1;
                worst = worst.max((hij - hji).abs() / hij.abs().max(hji.abs()));
                col_idx.push(j);
                values.push(0.5 * (hij + hji));
            }
        }
        row_ptr.push(col_idx.len());
    }
    if worst > 1e-6 {
        return Err(AmvError::AsymmetricHessian(worst));
    }
    Ok(SparseHessian {
        grid,
        channels,
        row_ptr,
        col_idx,
        values,
    })
}

/// Hessian of `U` at `theta_hat`.
pub fn assemble_hessian(
    theta_hat: &StateVector,
    y: &ObservationSet,
    params: &ModelParams,
    band_radius: Option<f64>,
) -> Result<SparseHessian> {
    let post = Posterior::new(y.clone(), *params)?;
    assemble_posterior_hessian(&post, theta_hat.as_slice(), band_radius)
}

pub fn assemble_posterior_hessian(
    post: &Posterior,
    theta: &[f64],
    band_radius: Option<f64>,
) -> Result<SparseHessian> {
    let op = HessianOperator::new(post, theta)?;
    assemble_from_operator(post.grid(), post.channels(), |v| op.apply(v), band_radius)
}

/// Eigendecomposition of the Hessian restricted to a pixel neighbourhood.
#[derive(Debug, Clone)]
pub struct LocalEvd {
    pub indices: Vec<usize>,
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl LocalEvd {
    pub fn is_positive_definite(&self) -> bool {
        self.eigenvalues.iter().all(|&l| l > 0.0)
    }

    /// `|Lambda^{-1/2} V^T e_p|` for local position `p`.
    pub fn scaled_norm(&self, p: usize) -> f64 {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &l)| self.eigenvectors[(p, i)].powi(2) / l)
            .sum::<f64>()
            .sqrt()
    }
}

/// Pixels within Euclidean periodic distance `radius` of `s`, deduplicated.
pub fn disk(grid: PixelGrid, s: usize, radius: f64) -> Vec<usize> {
    let (r0, c0) = grid.position(s);
    let ri = radius.floor() as isize;
    let mut out = Vec::new();
    for dr in -ri..=ri {
        for dc in -ri..=ri {
            if ((dr * dr + dc * dc) as f64) <= radius * radius {
                out.push(grid.wrapped_index(r0 as isize + dr, c0 as isize + dc));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn neighbourhood(h: &SparseHessian, s: usize, radius: f64) -> Vec<usize> {
    let m = h.grid.len();
    let pixels = disk(h.grid, s, radius);
    (0..2 + h.channels)
        .flat_map(|c| pixels.iter().map(move |&q| c * m + q))
        .collect()
}

pub fn local_evd(h: &SparseHessian, s: usize, radius: f64) -> LocalEvd {
    let indices = neighbourhood(h, s, radius);
    let eig = SymmetricEigen::new(h.restrict(&indices));
    LocalEvd {
        indices,
        eigenvalues: eig.eigenvalues,
        eigenvectors: eig.eigenvectors,
    }
}

/// Local factorisation used for the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LocalSolver {
    /// Full eigendecomposition of each restricted block.
    #[default]
    Eigen,
    /// Cholesky factorisation: same value `sqrt(e' H^{-1} e)`, cheaper.
    Cholesky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceErrorMap {
    /// `F = sqrt(2/pi) sum_j |Lambda^{-1/2} V^T psi_j|`.
    pub upper: ExpectedErrorMap,
    /// `F / sqrt(l)`.
    pub lower: ExpectedErrorMap,
    /// Pixels whose restricted Hessian is not positive definite.
    pub flagged: Vec<usize>,
    pub radius: f64,
}

fn local_bound(
    h: &SparseHessian,
    obs: &ObservableSet,
    s: usize,
    radius: f64,
    solver: LocalSolver,
) -> Option<f64> {
    let indices = neighbourhood(h, s, radius);
    let targets: Vec<usize> = obs
        .coords(s)
        .iter()
        .map(|c| {
            indices
                .iter()
                .position(|i| i == c)
                .expect("pixel lies in its own disk")
        })
        .collect();
    let block = h.restrict(&indices);
    let norms: Vec<f64> = match solver {
        LocalSolver::Eigen => {
            let eig = SymmetricEigen::new(block);
            let evd = LocalEvd {
                indices,
                eigenvalues: eig.eigenvalues,
                eigenvectors: eig.eigenvectors,
            };
            if !evd.is_positive_definite() {
                return None;
            }
            targets.iter().map(|&p| evd.scaled_norm(p)).collect()
        }
        LocalSolver::Cholesky => {
            let chol = block.cholesky()?;
            targets
                .iter()
                .map(|&p| {
                    let mut e = DVector::zeros(indices.len());
                    e[p] = 1.0;
                    let z = chol
                        .l()
                        .solve_lower_triangular(&e)
                        .expect("nonsingular factor");
                    z.norm()
                })
                .collect()
        }
    };
    Some((2.0 / std::f64::consts::PI).sqrt() * norms.iter().sum::<f64>())
}

/// Laplace bound on the expected error of each observable in `obs`.
pub fn laplace_error_map(
    h: &SparseHessian,
    obs: &ObservableSet,
    radius: f64,
) -> Result<LaplaceErrorMap> {
    laplace_error_map_with(h, obs, radius, LocalSolver::Eigen)
}

pub fn laplace_error_map_with(
    h: &SparseHessian,
    obs: &ObservableSet,
    radius: f64,
    solver: LocalSolver,
) -> Result<LaplaceErrorMap> {
    if obs.grid() != h.grid || obs.channels() != h.channels {
        return Err(AmvError::GridMismatch("observables vs Hessian".into()));
    }
    if !(radius >= 0.0) {
        return Err(AmvError::InvalidParameter(format!(
            "radius must be nonnegative, got {radius}"
        )));
    }
    let bounds: Vec<Option<f64>> = obs
        .pixels()
        .par_iter()
        .map(|&s| local_bound(h, obs, s, radius, solver))
        .collect();
    let flagged: Vec<usize> = obs
        .pixels()
        .iter()
        .zip(&bounds)
        .filter(|(_, b)| b.is_none())
        .map(|(&s, _)| s)
        .collect();
    if !flagged.is_empty() {
        log::warn!("{} pixels with indefinite local Hessian", flagged.len());
    }
    let upper: Vec<f64> = bounds.iter().map(|b| b.unwrap_or(f64::NAN)).collect();
    let l = (obs.ell() as f64).sqrt();
    let lower: Vec<f64> = upper.iter().map(|f| f / l).collect();
    Ok(LaplaceErrorMap {
        upper: ExpectedErrorMap::from_observables(obs, &upper),
        lower: ExpectedErrorMap::from_observables(obs, &lower),
        flagged,
        radius,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub radii: Vec<f64>,
    /// Max relative change of `F` between consecutive radii.
    pub changes: Vec<f64>,
    /// Smallest radius beyond which `F` moves by less than the tolerance.
    pub r_star: Option<f64>,
}

/// How fast the local bound stabilises as the neighbourhood grows.
pub fn screening_radius(
    h: &SparseHessian,
    obs: &ObservableSet,
    radii: &[f64],
    tol: f64,
) -> Result<ScreeningReport> {
    let mut maps = Vec::with_capacity(radii.len());
    for &r in radii {
        maps.push(
            laplace_error_map_with(h, obs, r, LocalSolver::Cholesky)?
                .upper
                .on(obs.pixels()),
        );
    }
    let changes: Vec<f64> = maps
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| ((b - a) / a).abs())
                .fold(0.0, |acc: f64, v| {
                    if v.is_nan() {
                        f64::INFINITY
                    } else {
                        acc.max(v)
                    }
                })
        })
        .collect();
    let r_star = changes.iter().position(|&c| c < tol).map(|i| radii[i]);
    Ok(ScreeningReport {
        radii: radii.to_vec(),
        changes,
        r_star,
    })
}

/// Observables of the given kind on every pixel.
pub fn full_observables(h: &SparseHessian, kind: ObservableKind) -> Result<ObservableSet> {
    ObservableSet::new(h.grid, h.channels, kind, (0..h.grid.len()).collect())
}
