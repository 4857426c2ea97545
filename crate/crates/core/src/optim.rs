//! MAP estimation by L-BFGS with a strong-Wolfe line search, optionally in
//! orthonormal wavelet coordinates.

use serde::{Deserialize, Serialize};

use crate::energy::{ModelParams, Posterior, Target};
use crate::error::{AmvError, Result};
use crate::laplace::HessianOperator;
use crate::model::{ObservationSet, StateVector};
use crate::wavelet::{WaveletBasis, WaveletFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Gradient-norm tolerance; `None` means `1e-6 * sqrt(n)`.
    pub grad_tol: Option<f64>,
    /// Optimisation variable: wavelet coefficients of the given family, or pixels if `None`.
    pub wavelet: Option<WaveletFamily>,
    /// Wavelet depth; `None` uses the grid default.
    pub wavelet_depth: Option<usize>,
    /// Release wavelet scales one at a time, coarsest first, each stage warm-started
    /// from the previous one with finer coefficients held fixed.
    pub coarse_to_fine: bool,
    /// Trust-region Newton polish after L-BFGS (posterior targets only).
    pub newton: Option<NewtonConfig>,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            grad_tol: None,
            wavelet: Some(WaveletFamily::Coiflet5),
            wavelet_depth: None,
            coarse_to_fine: false,
            newton: Some(NewtonConfig::default()),
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(AmvError::InvalidParameter(
                "L-BFGS memory must be at least 1".into(),
            ));
        }
        if let Some(t) = self.grad_tol {
            if !(t > 0.0) {
                return Err(AmvError::InvalidParameter(format!(
                    "gradient tolerance must be positive, got {t}"
                )));
            }
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(AmvError::InvalidParameter(format!(
                "line-search constants need 0 < c1 < c2 < 1, got {} and {}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    /// Energy at the initial point and after every accepted iteration.
    pub energy_trace: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], alpha: f64, p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(a, b)| a + alpha * b).collect()
}

/// Minimiser of the cubic interpolating `(a, fa, ga)` and `(b, fb, gb)`, safeguarded into the interval.
fn cubic_step(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let mut t = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    } else {
        f64::NAN
    };
    let width = hi - lo;
    if !t.is_finite() || t < lo + 0.1 * width || t > hi - 0.1 * width {
        t = 0.5 * (lo + hi);
    }
    t
}

struct LineResult {
    step: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe line search along descent direction `p`.
fn strong_wolfe<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    f: &mut F,
    evals: &mut usize,
    x: &[f64],
    fx: f64,
    gx: &[f64],
    p: &[f64],
    step0: f64,
    cfg: &OptimConfig,
) -> Option<LineResult> {
    let dg0 = dot(gx, p);
    let (c1, c2) = (cfg.c1, cfg.c2);
    let mut eval = |t: f64, evals: &mut usize| {
        let xt = axpy(x, t, p);
        let (ft, gt) = f(&xt);
        *evals += 1;
        let dg = dot(&gt, p);
        (xt, ft, gt, dg)
    };

    let (mut t_prev, mut f_prev, mut dg_prev) = (0.0, fx, dg0);
    let mut t = step0;
    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None;
    for i in 0..cfg.max_line_search {
        let (xt, ft, gt, dg) = eval(t, evals);
        if !ft.is_finite() {
            // shrink into the finite region
            bracket = None;
            t = 0.5 * (t_prev + t);
            continue;
        }
        if ft > fx + c1 * t * dg0 || (i > 0 && ft >= f_prev) {
            bracket = Some((t_prev, f_prev, dg_prev, t, ft, dg));
            break;
        }
        if dg.abs() <= -c2 * dg0 {
            return Some(LineResult {
                step: t,
                x: xt,
                f: ft,
                g: gt,
            });
        }
        if dg >= 0.0 {
            bracket = Some((t, ft, dg, t_prev, f_prev, dg_prev));
            break;
        }
        t_prev = t;
        f_prev = ft;
        dg_prev = dg;
        t *= 2.0;
    }
    let (mut lo, mut flo, mut glo, mut hi, mut fhi, mut ghi) = bracket?;
    for _ in 0..cfg.max_line_search {
        let t = cubic_step(lo, flo, glo, hi, fhi, ghi);
        let (xt, ft, gt, dg) = eval(t, evals);
        if !ft.is_finite() || ft > fx + c1 * t * dg0 || ft >= flo {
            hi = t;
            fhi = if ft.is_finite() { ft } else { f64::MAX };
            ghi = if dg.is_finite() { dg } else { 0.0 };
        } else {
            if dg.abs() <= -c2 * dg0 {
                return Some(LineResult {
                    step: t,
                    x: xt,
                    f: ft,
                    g: gt,
                });
            }
            if dg * (hi - lo) >= 0.0 {
                hi = lo;
                fhi = flo;
                ghi = glo;
            }
            lo = t;
            flo = ft;
            glo = dg;
        }
        if (hi - lo).abs() < 1e-16 * lo.abs().max(1e-300) {
            break;
        }
    }
    // accept the best sufficient-decrease point if curvature could not be met
    if flo < fx && lo > 0.0 {
        let xt = axpy(x, lo, p);
        let (ft, gt) = f(&xt);
        *evals += 1;
        return Some(LineResult {
            step: lo,
            x: xt,
            f: ft,
            g: gt,
        });
    }
    None
}

/// Generic L-BFGS on `f`, returning the final point and diagnostics.
pub fn lbfgs_minimize<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    mut f: F,
    x0: Vec<f64>,
    cfg: &OptimConfig,
) -> Result<(Vec<f64>, OptimDiagnostics)> {
    cfg.validate()?;
    let n = x0.len();
    let tol = cfg.grad_tol.unwrap_or(1e-6 * (n as f64).sqrt());
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(AmvError::NonFinite("initial energy"));
    }
    let mut diag = OptimDiagnostics {
        iterations: 0,
        evaluations: 1,
        energy_trace: vec![fx],
        grad_norm: norm(&g),
        converged: false,
        line_search_failed: false,
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    while diag.iterations < cfg.max_iterations {
        if diag.grad_norm <= tol {
            diag.converged = true;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
            q = axpy(&q, -alpha[i], &y_hist[i]);
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            q = axpy(&q, alpha[i] - beta, &s_hist[i]);
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&p, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            p = g.iter().map(|v| -v).collect();
        }
        let step0 = if s_hist.is_empty() {
            (1.0 / norm(&p)).min(1.0)
        } else {
            1.0
        };
        let res = match strong_wolfe(&mut f, &mut diag.evaluations, &x, fx, &g, &p, step0, cfg) {
            Some(r) => Some(r),
            None if !s_hist.is_empty() => {
                // retry once with steepest descent from a fresh memory
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                let p: Vec<f64> = g.iter().map(|v| -v).collect();
                let step0 = (1.0 / norm(&p)).min(1.0);
                strong_wolfe(&mut f, &mut diag.evaluations, &x, fx, &g, &p, step0, cfg)
            }
            None => None,
        };
        let Some(res) = res else {
            log::warn!(
                "line search failed after {} iterations (|g| = {:.3e})",
                diag.iterations,
                diag.grad_norm
            );
            diag.line_search_failed = true;
            break;
        };
        let s: Vec<f64> = res.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = res.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
        }
        let _ = res.step;
        x = res.x;
        fx = res.f;
        g = res.g;
        diag.iterations += 1;
        diag.energy_trace.push(fx);
        diag.grad_norm = norm(&g);
    }
    if diag.grad_norm <= tol {
        diag.converged = true;
    }
    Ok((x, diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub max_iterations: usize,
    /// Conjugate-gradient iterations per subproblem.
    pub max_cg: usize,
    /// Gradient-norm tolerance; `None` means `1e-8 * sqrt(n)`.
    pub grad_tol: Option<f64>,
    pub initial_radius: f64,
    pub max_radius: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            max_cg: 1000,
            grad_tol: None,
            initial_radius: 1.0,
            max_radius: 1e4,
        }
    }
}

/// Approximate minimiser of `g' p + p' H p / 2` over `|p| <= radius` by truncated CG
/// (Steihaug), stopping on negative curvature or at the boundary.
pub fn steihaug_cg<H: Fn(&[f64]) -> Vec<f64>>(
    hv: &H,
    g: &[f64],
    radius: f64,
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let n = g.len();
    let mut z = vec![0.0; n];
    let mut r = g.to_vec();
    let mut d: Vec<f64> = r.iter().map(|v| -v).collect();
    let mut rr = dot(&r, &r);
    if rr.sqrt() < tol {
        return z;
    }
    let to_boundary = |z: &[f64], d: &[f64]| {
        let (a, b, c) = (dot(d, d), 2.0 * dot(z, d), dot(z, z) - radius * radius);
        let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
        axpy(z, tau, d)
    };
    for _ in 0..max_iter {
        let hd = hv(&d);
        let dhd = dot(&d, &hd);
        if dhd <= 0.0 {
            return to_boundary(&z, &d);
        }
        let a = rr / dhd;
        let z_next = axpy(&z, a, &d);
        if norm(&z_next) >= radius {
            return to_boundary(&z, &d);
        }
        r = axpy(&r, a, &hd);
        let rr_next = dot(&r, &r);
        z = z_next;
        if rr_next.sqrt() < tol {
            break;
        }
        let beta = rr_next / rr;
        d = r.iter().zip(&d).map(|(ri, di)| -ri + beta * di).collect();
        rr = rr_next;
    }
    z
}

/// Trust-region Newton with Steihaug-CG subproblems. `model(x)` returns the
/// Hessian-vector product at `x`.
pub fn trust_region_newton<'a, F, M>(
    mut f: F,
    mut model: M,
    x0: Vec<f64>,
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, OptimDiagnostics)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    M: FnMut(&[f64]) -> Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>,
{
    if !(cfg.initial_radius > 0.0 && cfg.max_radius >= cfg.initial_radius) || cfg.max_cg == 0 {
        return Err(AmvError::InvalidParameter(
            "invalid trust-region settings".into(),
        ));
    }
    let n = x0.len();
    let tol = cfg.grad_tol.unwrap_or(1e-8 * (n as f64).sqrt());
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(AmvError::NonFinite("initial energy"));
    }
    let mut diag = OptimDiagnostics {
        iterations: 0,
        evaluations: 1,
        energy_trace: vec![fx],
        grad_norm: norm(&g),
        converged: false,
        line_search_failed: false,
    };
    let mut radius = cfg.initial_radius;
    let mut rejected = 0;
    while diag.iterations < cfg.max_iterations && diag.grad_norm > tol {
        let hv = model(&x);
        let gn = diag.grad_norm;
        let p = steihaug_cg(&hv, &g, radius, (0.5f64).min(gn.sqrt()) * gn, cfg.max_cg);
        let hp = hv(&p);
        let pred = -(dot(&g, &p) + 0.5 * dot(&p, &hp));
        let xt = axpy(&x, 1.0, &p);
        let (ft, gt) = f(&xt);
        diag.evaluations += 1;
        let rho = if pred > 0.0 && ft.is_finite() {
            (fx - ft) / pred
        } else {
            -1.0
        };
        let pn = norm(&p);
        if rho < 0.25 {
            radius = 0.25 * pn.max(1e-12);
        } else if rho > 0.75 && pn > 0.99 * radius {
            radius = (2.0 * radius).min(cfg.max_radius);
        }
        if rho > 1e-4 {
            x = xt;
            fx = ft;
            g = gt;
            diag.iterations += 1;
            diag.energy_trace.push(fx);
            diag.grad_norm = norm(&g);
            rejected = 0;
        } else {
            rejected += 1;
            if rejected > 30 || radius < 1e-14 {
                log::warn!("trust region collapsed at |g| = {:.3e}", diag.grad_norm);
                diag.line_search_failed = true;
                break;
            }
        }
    }
    diag.converged = diag.grad_norm <= tol;
    Ok((x, diag))
}

/// Trust-region Newton refinement of a state on the posterior, using exact Hessian-vector products.
pub fn refine_map(
    post: &Posterior,
    theta: &StateVector,
    cfg: &NewtonConfig,
) -> Result<(StateVector, OptimDiagnostics)> {
    if theta.len() != post.dim() {
        return Err(AmvError::DimensionMismatch {
            expected: post.dim(),
            actual: theta.len(),
        });
    }
    let model = |x: &[f64]| -> Box<dyn Fn(&[f64]) -> Vec<f64> + '_> {
        let op = HessianOperator::new(post, x).expect("dimension checked");
        Box::new(move |v: &[f64]| op.apply(v))
    };
    let (x, diag) = trust_region_newton(
        |t| post.energy_and_gradient(t),
        model,
        theta.as_slice().to_vec(),
        cfg,
    )?;
    Ok((
        StateVector::from_vec(theta.grid(), theta.channels(), x)?,
        diag,
    ))
}

/// Zero displacement; image at t1 equal to the observation where observed and
/// to the per-channel observed mean elsewhere.
pub fn default_init(y: &ObservationSet) -> StateVector {
    let grid = y.grid();
    let m = grid.len();
    let k = y.channels();
    let mut data = vec![0.0; (2 + k) * m];
    let mask = y.mask.t1();
    let count = y.mask.count_t1();
    for c in 0..k {
        let ch = y.y_t1.channel(c);
        let mean = if count > 0 {
            (0..m).filter(|&s| mask[s]).map(|s| ch[s]).sum::<f64>() / count as f64
        } else {
            0.0
        };
        for s in 0..m {
            data[2 * m + c * m + s] = if mask[s] { ch[s] } else { mean };
        }
    }
    StateVector::from_vec(grid, k, data).expect("layout matches observations")
}

/// MAP estimate of the posterior defined by `y` and `params`.
pub fn estimate_map(
    y: &ObservationSet,
    params: &ModelParams,
    config: &OptimConfig,
    init: &StateVector,
) -> Result<(StateVector, OptimDiagnostics)> {
    let post = Posterior::new(y.clone(), *params)?;
    estimate_posterior_map(&post, config, init)
}

/// L-BFGS in wavelet coordinates, then the optional Newton polish.
pub fn estimate_posterior_map(
    post: &Posterior,
    config: &OptimConfig,
    init: &StateVector,
) -> Result<(StateVector, OptimDiagnostics)> {
    let (x, mut diag) = minimize_target(post, config, init)?;
    let Some(newton) = config.newton else {
        return Ok((x, diag));
    };
    let (x, nd) = refine_map(post, &x, &newton)?;
    log::debug!(
        "Newton polish: {} iterations, |g| {:e} -> {:e}",
        nd.iterations,
        diag.grad_norm,
        nd.grad_norm
    );
    diag.iterations += nd.iterations;
    diag.evaluations += nd.evaluations;
    diag.energy_trace
        .extend(nd.energy_trace.into_iter().skip(1));
    diag.grad_norm = nd.grad_norm;
    diag.converged = nd.converged;
    diag.line_search_failed |= nd.line_search_failed;
    Ok((x, diag))
}

/// L-BFGS on the posterior energy of a state-shaped target.
pub fn minimize_target<T: Target>(
    post: &T,
    config: &OptimConfig,
    init: &StateVector,
) -> Result<(StateVector, OptimDiagnostics)> {
    if init.len() != post.dim() {
        return Err(AmvError::DimensionMismatch {
            expected: post.dim(),
            actual: init.len(),
        });
    }
    if init.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(AmvError::NonFinite("initial state"));
    }
    let grid = init.grid();
    let (x, diag) = match config.wavelet {
        None => lbfgs_minimize(
            |t| post.energy_and_gradient(t),
            init.as_slice().to_vec(),
            config,
        )?,
        Some(family) => {
            let basis = match config.wavelet_depth {
                Some(depth) => WaveletBasis::new(family, depth),
                None => WaveletBasis::for_grid(family, grid),
            };
            let mut a = init.as_slice().to_vec();
            basis.forward_blocks(grid, &mut a)?;
            let to_pixels = |a: &[f64]| {
                let mut t = a.to_vec();
                basis.inverse_blocks(grid, &mut t).expect("checked basis");
                t
            };
            let scales = basis.coefficient_scales(grid);
            let m = grid.len();
            let stages: Vec<usize> = if config.coarse_to_fine {
                (0..=basis.depth()).collect()
            } else {
                vec![basis.depth()]
            };
            let mut total: Option<OptimDiagnostics> = None;
            for stage in stages {
                let active: Vec<usize> = (0..a.len()).filter(|&i| scales[i % m] <= stage).collect();
                let start: Vec<f64> = active.iter().map(|&i| a[i]).collect();
                let frozen = a.clone();
                let (sub, diag) = lbfgs_minimize(
                    |z| {
                        let mut full = frozen.clone();
                        for (&i, &v) in active.iter().zip(z) {
                            full[i] = v;
                        }
                        let (u, mut g) = post.energy_and_gradient(&to_pixels(&full));
                        basis.forward_blocks(grid, &mut g).expect("checked basis");
                        (u, active.iter().map(|&i| g[i]).collect())
                    },
                    start,
                    config,
                )?;
                for (&i, &v) in active.iter().zip(&sub) {
                    a[i] = v;
                }
                log::debug!(
                    "wavelet stage {stage}: {} iterations, |g| = {:e}",
                    diag.iterations,
                    diag.grad_norm
                );
                total = Some(match total {
                    None => diag,
                    Some(mut t) => {
                        t.iterations += diag.iterations;
                        t.evaluations += diag.evaluations;
                        t.energy_trace.extend(diag.energy_trace.into_iter().skip(1));
                        t.grad_norm = diag.grad_norm;
                        t.converged = diag.converged;
                        t.line_search_failed |= diag.line_search_failed;
                        t
                    }
                });
            }
            (to_pixels(&a), total.expect("at least one stage"))
        }
    };
    Ok((StateVector::from_vec(grid, init.channels(), x)?, diag))
}
