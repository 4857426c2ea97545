//! Single Metropolis-Hastings transitions.
//!
//! Every kernel consumes exactly `n` standard normals followed by one uniform,
//! so kernels driven by the same stream stay in lockstep.

use rand::Rng;
use rand_distr::StandardNormal;

use super::precond::Preconditioner;
use crate::energy::Target;
use crate::error::{AmvError, Result};

/// Energy changes beyond this are treated as divergent trajectories.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChainStats {
    pub proposed: usize,
    pub accepted: usize,
    pub numerical_rejects: usize,
    pub divergences: usize,
}

impl ChainStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &ChainStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.numerical_rejects += other.numerical_rejects;
        self.divergences += other.divergences;
    }
}

/// Current point of a chain with cached energy and gradient.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
    pub stats: ChainStats,
}

impl ChainState {
    pub fn new<T: Target + ?Sized>(target: &T, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != target.dim() {
            return Err(AmvError::DimensionMismatch {
                expected: target.dim(),
                actual: theta.len(),
            });
        }
        let (energy, grad) = target.energy_and_gradient(&theta);
        if !energy.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AmvError::NonFinite("initial chain energy"));
        }
        Ok(Self {
            theta,
            energy,
            grad,
            stats: ChainStats::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub numerical_reject: bool,
    pub divergent: bool,
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accept with probability `min(1, exp(log_ratio))`. Returns `(accepted, numerical)`;
/// a NaN ratio is rejected and flagged. Always draws one uniform.
pub fn mh_accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> (bool, bool) {
    let u: f64 = rng.random();
    if log_ratio.is_nan() {
        return (false, true);
    }
    (u < log_ratio.exp(), false)
}

/// `theta + sqrt(dt) xi` with `xi ~ N(0, I)` or `N(0, Sigma)`.
pub fn rw_propose<R: Rng + ?Sized>(
    rng: &mut R,
    theta: &[f64],
    dt: f64,
    precond: Option<&dyn Preconditioner>,
) -> Vec<f64> {
    let z = normals(rng, theta.len());
    let xi = match precond {
        Some(p) => p.apply_sqrt(&z),
        None => z,
    };
    let s = dt.sqrt();
    theta.iter().zip(&xi).map(|(t, x)| t + s * x).collect()
}

fn record(state: &mut ChainState, accepted: bool, numerical: bool, divergent: bool) -> StepOutcome {
    state.stats.proposed += 1;
    if accepted {
        state.stats.accepted += 1;
    }
    if numerical {
        state.stats.numerical_rejects += 1;
    }
    if divergent {
        state.stats.divergences += 1;
    }
    StepOutcome {
        accepted,
        numerical_reject: numerical,
        divergent,
    }
}

/// Random-walk Metropolis step (symmetric proposal, ratio `U - U'`).
pub fn rw_step<R: Rng + ?Sized, T: Target + ?Sized>(
    rng: &mut R,
    target: &T,
    precond: Option<&dyn Preconditioner>,
    state: &mut ChainState,
    dt: f64,
) -> StepOutcome {
    let prop = rw_propose(rng, &state.theta, dt, precond);
    let u_new = target.energy(&prop);
    let lr = if u_new.is_finite() {
        state.energy - u_new
    } else {
        f64::NAN
    };
    let (acc, numerical) = mh_accept(rng, lr);
    if acc {
        state.theta = prop;
        state.energy = u_new;
    }
    record(state, acc, numerical, false)
}

/// Log acceptance ratio of a Langevin move `theta -> theta'`:
/// `U - U' - |w~|^2 / (2 dt) + |w|^2 / (2 dt)` in the `Sigma^{-1}` norm, with
/// `w = theta' - theta + dt/2 Sigma g` and `w~ = theta - theta' + dt/2 Sigma g'`.
pub fn mala_log_ratio<P: Preconditioner + ?Sized>(
    precond: &P,
    dt: f64,
    from: (&[f64], f64, &[f64]),
    to: (&[f64], f64, &[f64]),
) -> f64 {
    let (theta, u, g) = from;
    let (theta_p, u_p, g_p) = to;
    let sg = precond.apply(g);
    let sgp = precond.apply(g_p);
    let w: Vec<f64> = (0..theta.len())
        .map(|i| theta_p[i] - theta[i] + 0.5 * dt * sg[i])
        .collect();
    let wt: Vec<f64> = (0..theta.len())
        .map(|i| theta[i] - theta_p[i] + 0.5 * dt * sgp[i])
        .collect();
    let qw = dot(&w, &precond.apply_inverse(&w));
    let qwt = dot(&wt, &precond.apply_inverse(&wt));
    u - u_p - qwt / (2.0 * dt) + qw / (2.0 * dt)
}

/// Preconditioned Langevin proposal `theta - dt/2 Sigma g + sqrt(dt) S z` with exact MH correction.
pub fn mala_step<R: Rng + ?Sized, T: Target + ?Sized, P: Preconditioner + ?Sized>(
    rng: &mut R,
    target: &T,
    precond: &P,
    state: &mut ChainState,
    dt: f64,
) -> StepOutcome {
    let z = normals(rng, state.theta.len());
    let noise = precond.apply_sqrt(&z);
    let drift = precond.apply(&state.grad);
    let s = dt.sqrt();
    let prop: Vec<f64> = (0..state.theta.len())
        .map(|i| state.theta[i] - 0.5 * dt * drift[i] + s * noise[i])
        .collect();
    let (u_new, g_new) = target.energy_and_gradient(&prop);
    let lr = if u_new.is_finite() {
        mala_log_ratio(
            precond,
            dt,
            (&state.theta, state.energy, &state.grad),
            (&prop, u_new, &g_new),
        )
    } else {
        f64::NAN
    };
    let (acc, numerical) = mh_accept(rng, lr);
    if acc {
        state.theta = prop;
        state.energy = u_new;
        state.grad = g_new;
    }
    record(state, acc, numerical, false)
}

/// End point of a leapfrog trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

/// `steps` leapfrog updates of step `eps` under kinetic energy `xi' Sigma xi / 2`:
/// `theta+ = theta + eps Sigma xi - eps^2/2 Sigma g`, `xi+ = xi - eps/2 (g + g+)`.
pub fn leapfrog<T: Target + ?Sized, P: Preconditioner + ?Sized>(
    target: &T,
    precond: &P,
    theta: &[f64],
    momentum: &[f64],
    grad: &[f64],
    eps: f64,
    steps: usize,
) -> Trajectory {
    let mut th = theta.to_vec();
    let mut xi = momentum.to_vec();
    let mut g = grad.to_vec();
    let mut u = f64::NAN;
    for _ in 0..steps {
        let sx = precond.apply(&xi);
        let sg = precond.apply(&g);
        for i in 0..th.len() {
            th[i] += eps * sx[i] - 0.5 * eps * eps * sg[i];
        }
        let (u_new, g_new) = target.energy_and_gradient(&th);
        for i in 0..xi.len() {
            xi[i] -= 0.5 * eps * (g[i] + g_new[i]);
        }
        g = g_new;
        u = u_new;
        if !u.is_finite() {
            break;
        }
    }
    Trajectory {
        theta: th,
        momentum: xi,
        energy: u,
        grad: g,
    }
}

pub fn kinetic<P: Preconditioner + ?Sized>(precond: &P, xi: &[f64]) -> f64 {
    0.5 * dot(xi, &precond.apply(xi))
}

/// Hamiltonian Monte Carlo step with `steps` leapfrog updates of size `eps`.
pub fn hmc_step<R: Rng + ?Sized, T: Target + ?Sized, P: Preconditioner + ?Sized>(
    rng: &mut R,
    target: &T,
    precond: &P,
    state: &mut ChainState,
    eps: f64,
    steps: usize,
) -> StepOutcome {
    let z = normals(rng, state.theta.len());
    let xi = precond.apply_inv_sqrt(&z);
    let h0 = state.energy + kinetic(precond, &xi);
    let traj = leapfrog(target, precond, &state.theta, &xi, &state.grad, eps, steps);
    let h1 = traj.energy + kinetic(precond, &traj.momentum);
    let lr = h0 - h1;
    let divergent = lr.is_finite() && lr.abs() > DIVERGENCE_THRESHOLD;
    let lr = if divergent || !lr.is_finite() {
        f64::NAN
    } else {
        lr
    };
    let (acc, numerical) = mh_accept(rng, lr);
    let numerical = numerical && !divergent;
    if acc {
        state.theta = traj.theta;
        state.energy = traj.energy;
        state.grad = traj.grad;
    }
    record(state, acc, numerical, divergent)
}
