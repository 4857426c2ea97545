//! Cubic B-spline image model and the warping operator.
//!
//! Images are represented by periodic cubic B-spline coefficients obtained by
//! separable recursive filtering. Warping evaluates the spline expansion at the
//! displaced positions `kappa(s) + d(s)`, touching the 4x4 coefficient cell
//! around each target point. Boundaries wrap.

use crate::error::{AmvError, Result};
use crate::model::{DisplacementField, ImageStack, PixelGrid};

/// Step (pixels) of the centred differences used for spatial derivatives of the warp.
pub const DERIV_STEP: f64 = 1e-3;

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// Cubic B-spline coefficients of an image stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoeffs {
    grid: PixelGrid,
    channels: usize,
    coeffs: Vec<f64>,
}

impl SplineCoeffs {
    pub fn new(grid: PixelGrid, channels: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.len() * channels {
            return Err(AmvError::DimensionMismatch {
                expected: grid.len() * channels,
                actual: coeffs.len(),
            });
        }
        Ok(Self {
            grid,
            channels,
            coeffs,
        })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let m = self.grid.len();
        &self.coeffs[c * m..(c + 1) * m]
    }
}

/// Cubic B-spline `beta^3(t)`.
#[inline]
pub fn bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Weights of the four basis functions with knots `floor(p) - 1 ..= floor(p) + 2`,
/// where `t = p - floor(p)`.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Periodic inverse of the `[1, 4, 1] / 6` sampling filter, in place.
fn prefilter_periodic(line: &mut [f64]) {
    let n = line.len();
    let z = POLE;
    let zn = z.powi(n as i32);
    for v in line.iter_mut() {
        *v *= 6.0;
    }
    // causal pass, initialised with the periodic sum
    let mut acc = 0.0;
    let mut zj = 1.0;
    for j in 0..n {
        acc += zj * line[(n - j) % n];
        zj *= z;
    }
    let mut prev = acc / (1.0 - zn);
    line[0] = prev;
    for v in line.iter_mut().skip(1) {
        prev = *v + z * prev;
        *v = prev;
    }
    // anti-causal pass
    let mut acc = 0.0;
    let mut zj = 1.0;
    for j in 0..n {
        acc += zj * line[(n - 1 + j) % n];
        zj *= z;
    }
    let mut next = -z * acc / (1.0 - zn);
    line[n - 1] = next;
    for k in (0..n - 1).rev() {
        next = z * (next - line[k]);
        line[k] = next;
    }
}

/// Separable periodic B-spline transform of one channel, in place. The operator
/// is symmetric, so it also implements its own transpose.
pub(crate) fn transform_channel(grid: PixelGrid, data: &mut [f64]) {
    let (rows, cols) = (grid.rows(), grid.cols());
    for r in 0..rows {
        prefilter_periodic(&mut data[r * cols..(r + 1) * cols]);
    }
    let mut column = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        prefilter_periodic(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

pub(crate) fn transform_stack(grid: PixelGrid, data: &mut [f64]) {
    for chunk in data.chunks_mut(grid.len()) {
        transform_channel(grid, chunk);
    }
}

/// Interpolating B-spline coefficients of `x`.
pub fn bspline_analysis(x: &ImageStack) -> SplineCoeffs {
    let mut coeffs = x.values().to_vec();
    transform_stack(x.grid(), &mut coeffs);
    SplineCoeffs {
        grid: x.grid(),
        channels: x.channels(),
        coeffs,
    }
}

/// Samples of the spline expansion at the grid points.
pub fn bspline_synthesis(c: &SplineCoeffs) -> ImageStack {
    let zero = vec![0.0; 2 * c.grid.len()];
    let values = warp_values(c.grid, c.channels, &c.coeffs, &zero);
    ImageStack::new(c.grid, c.channels, values).expect("synthesis of finite coefficients")
}

/// Evaluate one channel of the spline expansion at continuous position `(px, py)`
/// (column, row) under periodic wrapping.
#[inline]
pub(crate) fn eval_point(grid: PixelGrid, coef: &[f64], px: f64, py: f64) -> f64 {
    let fx = px.floor();
    let fy = py.floor();
    let wx = cubic_weights(px - fx);
    let wy = cubic_weights(py - fy);
    let (ix, iy) = (fx as isize - 1, fy as isize - 1);
    let mut acc = 0.0;
    for (b, wyb) in wy.iter().enumerate() {
        let mut row_acc = 0.0;
        for (a, wxa) in wx.iter().enumerate() {
            row_acc += wxa * coef[grid.wrapped_index(iy + b as isize, ix + a as isize)];
        }
        acc += wyb * row_acc;
    }
    acc
}

#[inline]
fn target(grid: PixelGrid, d: &[f64], s: usize) -> (f64, f64) {
    let (r, c) = grid.position(s);
    let m = grid.len();
    (c as f64 + d[s], r as f64 + d[m + s])
}

pub(crate) fn warp_values(grid: PixelGrid, channels: usize, coef: &[f64], d: &[f64]) -> Vec<f64> {
    let m = grid.len();
    let mut out = vec![0.0; channels * m];
    for s in 0..m {
        let (px, py) = target(grid, d, s);
        for ch in 0..channels {
            out[ch * m + s] = eval_point(grid, &coef[ch * m..(ch + 1) * m], px, py);
        }
    }
    out
}

/// Centred-difference derivatives of the warped channels along both axes.
pub(crate) fn spatial_derivs(
    grid: PixelGrid,
    channels: usize,
    coef: &[f64],
    d: &[f64],
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = grid.len();
    let mut dx = vec![0.0; channels * m];
    let mut dy = vec![0.0; channels * m];
    let inv = 0.5 / h;
    for s in 0..m {
        let (px, py) = target(grid, d, s);
        for ch in 0..channels {
            let cf = &coef[ch * m..(ch + 1) * m];
            dx[ch * m + s] =
                (eval_point(grid, cf, px + h, py) - eval_point(grid, cf, px - h, py)) * inv;
            dy[ch * m + s] =
                (eval_point(grid, cf, px, py + h) - eval_point(grid, cf, px, py - h)) * inv;
        }
    }
    (dx, dy)
}

/// Nested centred differences for `(d11, d12, d22)` of the warped channels.
pub(crate) fn second_derivs(
    grid: PixelGrid,
    channels: usize,
    coef: &[f64],
    d: &[f64],
    h: f64,
) -> [Vec<f64>; 3] {
    let m = grid.len();
    let mut out = [
        vec![0.0; channels * m],
        vec![0.0; channels * m],
        vec![0.0; channels * m],
    ];
    let q = 0.25 / (h * h);
    for s in 0..m {
        let (px, py) = target(grid, d, s);
        for ch in 0..channels {
            let cf = &coef[ch * m..(ch + 1) * m];
            let f = |ax: f64, ay: f64| eval_point(grid, cf, px + ax * h, py + ay * h);
            let i = ch * m + s;
            out[0][i] = (f(2.0, 0.0) - 2.0 * f(0.0, 0.0) + f(-2.0, 0.0)) * q;
            out[1][i] = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) * q;
            out[2][i] = (f(0.0, 2.0) - 2.0 * f(0.0, 0.0) + f(0.0, -2.0)) * q;
        }
    }
    out
}

/// Which basis weights the scatter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ScatterWeights {
    Value,
    /// Centred difference of the basis along axis 0 (columns) or 1 (rows).
    Derivative(usize),
}

/// `sum_i z(i) phi_s(kappa(i) + d(i))` accumulated into coefficient slots `s`.
pub(crate) fn scatter(
    grid: PixelGrid,
    channels: usize,
    d: &[f64],
    z: &[f64],
    kind: ScatterWeights,
) -> Vec<f64> {
    let m = grid.len();
    let mut out = vec![0.0; channels * m];
    let mut add = |px: f64, py: f64, scale: f64, s: usize| {
        let fx = px.floor();
        let fy = py.floor();
        let wx = cubic_weights(px - fx);
        let wy = cubic_weights(py - fy);
        let (ix, iy) = (fx as isize - 1, fy as isize - 1);
        for (b, wyb) in wy.iter().enumerate() {
            for (a, wxa) in wx.iter().enumerate() {
                let idx = grid.wrapped_index(iy + b as isize, ix + a as isize);
                let w = scale * wxa * wyb;
                for ch in 0..channels {
                    out[ch * m + idx] += w * z[ch * m + s];
                }
            }
        }
    };
    for s in 0..m {
        let (px, py) = target(grid, d, s);
        match kind {
            ScatterWeights::Value => add(px, py, 1.0, s),
            ScatterWeights::Derivative(axis) => {
                let inv = 0.5 / DERIV_STEP;
                let (ex, ey) = if axis == 0 {
                    (DERIV_STEP, 0.0)
                } else {
                    (0.0, DERIV_STEP)
                };
                add(px + ex, py + ey, inv, s);
                add(px - ex, py - ey, -inv, s);
            }
        }
    }
    out
}

fn check_grid(a: PixelGrid, b: PixelGrid) -> Result<()> {
    if a != b {
        return Err(AmvError::GridMismatch(
            "spline coefficients vs displacement".into(),
        ));
    }
    Ok(())
}

/// `W(x, d)`: the spline image evaluated at `kappa(s) + d(s)` for every pixel.
pub fn warp(c: &SplineCoeffs, d: &DisplacementField) -> Result<ImageStack> {
    check_grid(c.grid, d.grid())?;
    let v = warp_values(c.grid, c.channels, &c.coeffs, d.values());
    ImageStack::new(c.grid, c.channels, v)
}

/// Transpose of `x -> W(x, d)` applied to a per-pixel field `z`: scatter with the
/// basis weights, then the symmetric B-spline transform.
pub fn warp_adjoint_image(d: &DisplacementField, z: &ImageStack) -> Result<ImageStack> {
    check_grid(z.grid(), d.grid())?;
    let grid = z.grid();
    let mut v = scatter(
        grid,
        z.channels(),
        d.values(),
        z.values(),
        ScatterWeights::Value,
    );
    transform_stack(grid, &mut v);
    ImageStack::new(grid, z.channels(), v)
}

/// Horizontal and vertical derivatives of the warped image at the displaced points.
pub fn warp_spatial_derivs(
    c: &SplineCoeffs,
    d: &DisplacementField,
) -> Result<(ImageStack, ImageStack)> {
    warp_spatial_derivs_with_step(c, d, DERIV_STEP)
}

pub fn warp_spatial_derivs_with_step(
    c: &SplineCoeffs,
    d: &DisplacementField,
    h: f64,
) -> Result<(ImageStack, ImageStack)> {
    check_grid(c.grid, d.grid())?;
    let (dx, dy) = spatial_derivs(c.grid, c.channels, &c.coeffs, d.values(), h);
    Ok((
        ImageStack::new(c.grid, c.channels, dx)?,
        ImageStack::new(c.grid, c.channels, dy)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(grid: PixelGrid, k: usize, seed: u64) -> ImageStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageStack::new(
            grid,
            k,
            (0..k * grid.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn random_field(grid: PixelGrid, amp: f64, seed: u64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DisplacementField::new(
            grid,
            (0..2 * grid.len())
                .map(|_| rng.random_range(-amp..amp))
                .collect(),
        )
        .unwrap()
    }

    /// Analytic derivative of the cubic B-spline.
    fn bspline_deriv(t: f64) -> f64 {
        let a = t.abs();
        let sg = t.signum();
        if a < 1.0 {
            sg * (-2.0 * a + 1.5 * a * a)
        } else if a < 2.0 {
            -sg * 0.5 * (2.0 - a) * (2.0 - a)
        } else {
            0.0
        }
    }

    #[test]
    fn weights_match_basis() {
        for &t in &[0.0, 0.2, 0.5, 0.99] {
            let w = cubic_weights(t);
            let direct = [
                bspline(t + 1.0),
                bspline(t),
                bspline(t - 1.0),
                bspline(t - 2.0),
            ];
            for i in 0..4 {
                assert!((w[i] - direct[i]).abs() < 1e-15);
            }
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_image_has_constant_coefficients() {
        let g = PixelGrid::new(8, 16).unwrap();
        let x = ImageStack::new(g, 1, vec![3.25; g.len()]).unwrap();
        let c = bspline_analysis(&x);
        assert!(c.values().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn analysis_synthesis_round_trip() {
        for n in [1usize, 2, 4, 8, 32] {
            let g = PixelGrid::new(n, 2 * n).unwrap();
            let x = random_stack(g, 2, n as u64);
            let back = bspline_synthesis(&bspline_analysis(&x));
            for (a, b) in x.values().iter().zip(back.values()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "n={n}");
            }
        }
    }

    #[test]
    fn analysis_matches_dense_collocation_solve() {
        let g = PixelGrid::square(8).unwrap();
        let n = 8;
        let m = g.len();
        // collocation matrix: value at pixel s of basis centred at i
        let mut a = nalgebra::DMatrix::<f64>::zeros(m, m);
        for s in 0..m {
            let (rs, cs) = g.position(s);
            for i in 0..m {
                let (ri, ci) = g.position(i);
                let mut v = 0.0;
                for wr in -1i64..=1 {
                    for wc in -1i64..=1 {
                        let dr = rs as f64 - ri as f64 + (wr * n as i64) as f64;
                        let dc = cs as f64 - ci as f64 + (wc * n as i64) as f64;
                        v += bspline(dr) * bspline(dc);
                    }
                }
                a[(s, i)] = v;
            }
        }
        let x = random_stack(g, 1, 11);
        let rhs = nalgebra::DVector::from_column_slice(x.values());
        let sol = a.lu().solve(&rhs).unwrap();
        let c = bspline_analysis(&x);
        for i in 0..m {
            assert!((sol[i] - c.values()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_displacement_reproduces_image() {
        let g = PixelGrid::square(16).unwrap();
        let x = random_stack(g, 1, 3);
        let w = warp(&bspline_analysis(&x), &DisplacementField::zeros(g)).unwrap();
        for (a, b) in x.values().iter().zip(w.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_image_warps_to_constant() {
        let g = PixelGrid::square(8).unwrap();
        let x = ImageStack::new(g, 1, vec![-2.0; 64]).unwrap();
        let w = warp(&bspline_analysis(&x), &random_field(g, 5.0, 4)).unwrap();
        assert!(w.values().iter().all(|v| (v + 2.0).abs() < 1e-12));
    }

    #[test]
    fn ramp_shifted_by_one_pixel() {
        let g = PixelGrid::square(32).unwrap();
        let m = g.len();
        let x = ImageStack::new(g, 1, (0..m).map(|s| g.position(s).1 as f64).collect()).unwrap();
        let mut d = vec![0.0; 2 * m];
        d[..m].iter_mut().for_each(|v| *v = 1.0);
        let w = warp(
            &bspline_analysis(&x),
            &DisplacementField::new(g, d).unwrap(),
        )
        .unwrap();
        for s in 0..m {
            let col = g.position(s).1;
            // the periodic interpolant departs from the ramp near the seam
            if (8..=22).contains(&col) {
                assert!(
                    (w.values()[s] - (col as f64 + 1.0)).abs() < 1e-6,
                    "col {col}"
                );
            }
        }
    }

    #[test]
    fn ramp_derivatives() {
        let g = PixelGrid::square(64).unwrap();
        let m = g.len();
        let x = ImageStack::new(g, 1, (0..m).map(|s| g.position(s).1 as f64).collect()).unwrap();
        let c = bspline_analysis(&x);
        let (dx, dy) = warp_spatial_derivs(&c, &DisplacementField::zeros(g)).unwrap();
        for s in 0..m {
            let col = g.position(s).1;
            if (20..=44).contains(&col) {
                assert!((dx.values()[s] - 1.0).abs() < 1e-6);
            }
            assert!(dy.values()[s].abs() < 1e-9);
        }
        let g = PixelGrid::square(8).unwrap();
        let flat = ImageStack::new(g, 1, vec![4.0; g.len()]).unwrap();
        let (fx, fy) =
            warp_spatial_derivs(&bspline_analysis(&flat), &random_field(g, 2.0, 1)).unwrap();
        assert!(fx
            .values()
            .iter()
            .chain(fy.values())
            .all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn derivative_error_is_second_order() {
        let g = PixelGrid::square(16).unwrap();
        let m = g.len();
        // smooth periodic image
        let x = ImageStack::new(
            g,
            1,
            (0..m)
                .map(|s| {
                    let (r, c) = g.position(s);
                    let t = std::f64::consts::TAU / 16.0;
                    (t * c as f64).sin() + 0.5 * (2.0 * t * r as f64 + 0.3).cos()
                })
                .collect(),
        )
        .unwrap();
        let c = bspline_analysis(&x);
        let d = random_field(g, 1.5, 9);
        // analytic derivative of the expansion along columns
        let analytic: Vec<f64> = (0..m)
            .map(|s| {
                let (r, col) = g.position(s);
                let (px, py) = (col as f64 + d.d1()[s], r as f64 + d.d2()[s]);
                let mut acc = 0.0;
                for i in 0..m {
                    let (ri, ci) = g.position(i);
                    for wr in -1i64..=1 {
                        for wc in -1i64..=1 {
                            let dxp = px - ci as f64 - (wc * 16) as f64;
                            let dyp = py - ri as f64 - (wr * 16) as f64;
                            acc += c.values()[i] * bspline_deriv(dxp) * bspline(dyp);
                        }
                    }
                }
                acc
            })
            .collect();
        let err = |h: f64| -> f64 {
            let (dx, _) = warp_spatial_derivs_with_step(&c, &d, h).unwrap();
            dx.values()
                .iter()
                .zip(&analytic)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn warp_is_linear_in_coefficients() {
        let g = PixelGrid::square(8).unwrap();
        let d = random_field(g, 3.0, 5);
        let c1 = bspline_analysis(&random_stack(g, 1, 1));
        let c2 = bspline_analysis(&random_stack(g, 1, 2));
        let (a, b) = (0.7, -1.3);
        let comb = SplineCoeffs::new(
            g,
            1,
            c1.values()
                .iter()
                .zip(c2.values())
                .map(|(p, q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let w = warp(&comb, &d).unwrap();
        let (w1, w2) = (warp(&c1, &d).unwrap(), warp(&c2, &d).unwrap());
        for i in 0..64 {
            assert!((w.values()[i] - (a * w1.values()[i] + b * w2.values()[i])).abs() < 1e-12);
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn adjoint_identity_at_zero_displacement() {
        let g = PixelGrid::square(8).unwrap();
        let x = random_stack(g, 1, 7);
        let z = random_stack(g, 1, 8);
        let d = DisplacementField::zeros(g);
        let lhs = dot(
            warp(&bspline_analysis(&x), &d).unwrap().values(),
            z.values(),
        );
        let rhs = dot(x.values(), warp_adjoint_image(&d, &z).unwrap().values());
        assert!((lhs - rhs).abs() < 1e-10);
        let zero = warp_adjoint_image(&d, &ImageStack::zeros(g, 1)).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_matches_dense_jacobian() {
        let g = PixelGrid::square(8).unwrap();
        let m = g.len();
        let d = random_field(g, 2.5, 21);
        // column j of the linear map x -> W(x, d) is the image of the unit vector e_j
        let mut jac = nalgebra::DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let col = warp(&bspline_analysis(&ImageStack::new(g, 1, e).unwrap()), &d).unwrap();
            for i in 0..m {
                jac[(i, j)] = col.values()[i];
            }
        }
        let z = random_stack(g, 1, 22);
        let expect = jac.transpose() * nalgebra::DVector::from_column_slice(z.values());
        let got = warp_adjoint_image(&d, &z).unwrap();
        for i in 0..m {
            assert!((expect[i] - got.values()[i]).abs() < 1e-8);
        }
        // inner-product form with two channels
        let x = random_stack(g, 2, 30);
        let z2 = random_stack(g, 2, 31);
        let lhs = dot(
            warp(&bspline_analysis(&x), &d).unwrap().values(),
            z2.values(),
        );
        let rhs = dot(x.values(), warp_adjoint_image(&d, &z2).unwrap().values());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn evaluation_touches_sixteen_coefficients() {
        let g = PixelGrid::square(16).unwrap();
        let m = g.len();
        let d = random_field(g, 4.0, 2);
        for s in [0usize, 17, 100, 255] {
            let mut z = vec![0.0; m];
            z[s] = 1.0;
            let sc = scatter(g, 1, d.values(), &z, ScatterWeights::Value);
            assert!(sc.iter().filter(|v| **v != 0.0).count() <= 16);
        }
    }
}
