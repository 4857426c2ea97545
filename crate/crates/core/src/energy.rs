//! Gibbs energy of the joint displacement/image posterior, its gradient, and tempering.
//!
//! With `beta` the noise precision,
//!
//! ```text
//! U = beta (|delta_t0|^2 + |delta_t1|^2) + alpha (d1' P d1 + d2' P d2) + gamma |x|^2
//! ```
//!
//! where `P` is the fBm precision of exponent `hurst_prior`. No `1/2` factors.

use serde::{Deserialize, Serialize};

use crate::error::{AmvError, Result};
use crate::fbm::FbmOperator;
use crate::model::{residual_slices, ObservationSet, PixelGrid, ResidualVector, StateVector};
use crate::spline::{self, DERIV_STEP};

/// Anything the samplers can explore: an energy and its gradient on `R^n`.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    fn energy(&self, theta: &[f64]) -> f64;

    fn energy_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>);
}

impl<T: Target + ?Sized> Target for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        (**self).energy(theta)
    }

    fn energy_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (**self).energy_and_gradient(theta)
    }
}

/// `U / zeta`.
#[derive(Debug, Clone)]
pub struct Tempered<T> {
    inner: T,
    zeta: f64,
}

pub(crate) fn check_zeta(zeta: f64) -> Result<()> {
    if zeta > 0.0 && zeta <= 1.0 {
        Ok(())
    } else {
        Err(AmvError::InvalidParameter(format!(
            "temperature must lie in (0, 1], got {zeta}"
        )))
    }
}

impl<T: Target> Tempered<T> {
    pub fn new(inner: T, zeta: f64) -> Result<Self> {
        check_zeta(zeta)?;
        Ok(Self { inner, zeta })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Target> Target for Tempered<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        self.inner.energy(theta) / self.zeta
    }

    fn energy_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (u, mut g) = self.inner.energy_and_gradient(theta);
        g.iter_mut().for_each(|v| *v /= self.zeta);
        (u / self.zeta, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Displacement prior weight `alpha / beta`.
    pub alpha: f64,
    /// Image prior weight `gamma / beta`.
    pub gamma: f64,
    pub beta: f64,
    pub zeta: f64,
    pub hurst_prior: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.005,
            beta: 1.0,
            zeta: 1.0,
            hurst_prior: 1.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AmvError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.hurst_prior > 0.0 && self.hurst_prior.is_finite()) {
            return Err(AmvError::InvalidParameter(format!(
                "hurst_prior must be positive, got {}",
                self.hurst_prior
            )));
        }
        check_zeta(self.zeta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub total: f64,
    pub likelihood: f64,
    pub prior: f64,
}

/// Posterior energy for fixed observations and parameters, with cached operators.
#[derive(Debug, Clone)]
pub struct Posterior {
    obs: ObservationSet,
    params: ModelParams,
    prior: FbmOperator,
}

/// Intermediate quantities of one evaluation, reused by the Hessian code.
pub(crate) struct Evaluation {
    pub coef: Vec<f64>,
    pub delta: ResidualVector,
}

impl Posterior {
    pub fn new(obs: ObservationSet, params: ModelParams) -> Result<Self> {
        params.validate()?;
        let prior = FbmOperator::new(obs.grid(), params.hurst_prior)?;
        Ok(Self { obs, params, prior })
    }

    pub fn grid(&self) -> PixelGrid {
        self.obs.grid()
    }

    pub fn channels(&self) -> usize {
        self.obs.channels()
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn prior_operator(&self) -> &FbmOperator {
        &self.prior
    }

    pub(crate) fn evaluate(&self, theta: &[f64]) -> Evaluation {
        let grid = self.grid();
        let m = grid.len();
        let k = self.channels();
        let (d, x) = theta.split_at(2 * m);
        let mut coef = x.to_vec();
        spline::transform_stack(grid, &mut coef);
        let warped = spline::warp_values(grid, k, &coef, d);
        let delta = residual_slices(m, k, x, &warped, &self.obs);
        Evaluation { coef, delta }
    }

    fn prior_parts(&self, theta: &[f64]) -> f64 {
        let m = self.grid().len();
        let (d, x) = theta.split_at(2 * m);
        let pd = self.prior.prec_quadratic(&d[..m]) + self.prior.prec_quadratic(&d[m..]);
        self.params.alpha * pd + self.params.gamma * x.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn energy_value(&self, theta: &[f64]) -> EnergyValue {
        let ev = self.evaluate(theta);
        let likelihood = self.params.beta * ev.delta.squared_norm();
        let prior = self.prior_parts(theta);
        EnergyValue {
            total: likelihood + prior,
            likelihood,
            prior,
        }
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (EnergyValue, Vec<f64>) {
        let grid = self.grid();
        let m = grid.len();
        let k = self.channels();
        let (a, b, g) = (self.params.alpha, self.params.beta, self.params.gamma);
        let (d, x) = theta.split_at(2 * m);
        let ev = self.evaluate(theta);
        let (dx, dy) = spline::spatial_derivs(grid, k, &ev.coef, d, DERIV_STEP);

        let mut grad = vec![0.0; theta.len()];
        let p1 = self.prior.prec(&d[..m]);
        let p2 = self.prior.prec(&d[m..]);
        let prior_d = d[..m]
            .iter()
            .zip(&p1)
            .chain(d[m..].iter().zip(&p2))
            .map(|(u, v)| u * v)
            .sum::<f64>();
        for s in 0..m {
            let (mut g1, mut g2) = (0.0, 0.0);
            for ch in 0..k {
                let r = ev.delta.t0[ch * m + s];
                g1 += r * dx[ch * m + s];
                g2 += r * dy[ch * m + s];
            }
            grad[s] = 2.0 * a * p1[s] + 2.0 * b * g1;
            grad[m + s] = 2.0 * a * p2[s] + 2.0 * b * g2;
        }
        let mut adj = spline::scatter(grid, k, d, &ev.delta.t0, spline::ScatterWeights::Value);
        spline::transform_stack(grid, &mut adj);
        for i in 0..k * m {
            grad[2 * m + i] = 2.0 * g * x[i] + 2.0 * b * (adj[i] + ev.delta.t1[i]);
        }

        let likelihood = b * ev.delta.squared_norm();
        let prior = a * prior_d + g * x.iter().map(|v| v * v).sum::<f64>();
        (
            EnergyValue {
                total: likelihood + prior,
                likelihood,
                prior,
            },
            grad,
        )
    }
}

impl Target for Posterior {
    fn dim(&self) -> usize {
        (2 + self.channels()) * self.grid().len()
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        self.energy_value(theta).total
    }

    fn energy_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (e, g) = self.value_and_gradient(theta);
        (e.total, g)
    }
}

fn check_state(theta: &StateVector, y: &ObservationSet) -> Result<()> {
    if theta.grid() != y.grid() {
        return Err(AmvError::GridMismatch("state vs observations".into()));
    }
    if theta.channels() != y.channels() {
        return Err(AmvError::DimensionMismatch {
            expected: y.channels(),
            actual: theta.channels(),
        });
    }
    Ok(())
}

/// `|delta(theta, y)|^2` (unit noise precision).
pub fn likelihood_energy(theta: &StateVector, y: &ObservationSet) -> Result<f64> {
    check_state(theta, y)?;
    let grid = y.grid();
    let m = grid.len();
    let mut coef = theta.image().to_vec();
    spline::transform_stack(grid, &mut coef);
    let warped = spline::warp_values(grid, y.channels(), &coef, theta.displacement());
    Ok(residual_slices(m, y.channels(), theta.image(), &warped, y).squared_norm())
}

pub fn prior_energy(theta: &StateVector, params: &ModelParams) -> Result<f64> {
    params.validate()?;
    let op = FbmOperator::new(theta.grid(), params.hurst_prior)?;
    let pd = op.prec_quadratic(theta.d1()) + op.prec_quadratic(theta.d2());
    Ok(params.alpha * pd + params.gamma * theta.image().iter().map(|v| v * v).sum::<f64>())
}

pub fn gibbs_energy(
    theta: &StateVector,
    y: &ObservationSet,
    params: &ModelParams,
) -> Result<EnergyValue> {
    check_state(theta, y)?;
    Ok(Posterior::new(y.clone(), *params)?.energy_value(theta.as_slice()))
}

pub fn gradient(
    theta: &StateVector,
    y: &ObservationSet,
    params: &ModelParams,
) -> Result<StateVector> {
    check_state(theta, y)?;
    let (_, g) = Posterior::new(y.clone(), *params)?.value_and_gradient(theta.as_slice());
    StateVector::from_vec(theta.grid(), theta.channels(), g)
}

/// `U / zeta` with `zeta = params.zeta`.
pub fn tempered_energy(
    theta: &StateVector,
    y: &ObservationSet,
    params: &ModelParams,
) -> Result<f64> {
    Ok(gibbs_energy(theta, y, params)?.total / params.zeta)
}

pub fn tempered_gradient(
    theta: &StateVector,
    y: &ObservationSet,
    params: &ModelParams,
) -> Result<StateVector> {
    let g = gradient(theta, y, params)?;
    let z = params.zeta;
    StateVector::from_vec(
        theta.grid(),
        theta.channels(),
        g.into_vec().into_iter().map(|v| v / z).collect(),
    )
}

/// Map a tempered draw back to the original scale: `theta_hat + (theta_t - theta_hat) / sqrt(zeta)`.
pub fn rescale_sample(
    theta_t: &StateVector,
    theta_hat: &StateVector,
    zeta: f64,
) -> Result<StateVector> {
    if !(zeta > 0.0) {
        return Err(AmvError::InvalidParameter(format!(
            "temperature must be positive, got {zeta}"
        )));
    }
    if theta_t.len() != theta_hat.len() {
        return Err(AmvError::DimensionMismatch {
            expected: theta_hat.len(),
            actual: theta_t.len(),
        });
    }
    let out = rescale_slice(theta_t.as_slice(), theta_hat.as_slice(), zeta);
    StateVector::from_vec(theta_hat.grid(), theta_hat.channels(), out)
}

pub(crate) fn rescale_slice(theta_t: &[f64], theta_hat: &[f64], zeta: f64) -> Vec<f64> {
    let f = 1.0 / zeta.sqrt();
    theta_t
        .iter()
        .zip(theta_hat)
        .map(|(t, h)| h + f * (t - h))
        .collect()
}
