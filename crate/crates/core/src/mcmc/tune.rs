use serde::{Deserialize, Serialize};

use super::chain::{posterior_preconditioner, run_single_chain, ChainConfig, SamplerKind};
use super::precond::Preconditioner;
use crate::energy::{ModelParams, Posterior, Target};
use crate::error::{AmvError, Result};
use crate::model::{ObservationSet, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub low: f64,
    pub high: f64,
    pub max_pilots: usize,
    pub pilot_steps: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            low: 0.85,
            high: 0.95,
            max_pilots: 20,
            pilot_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub dt: f64,
    pub acceptance: f64,
    pub pilots: usize,
    pub in_band: bool,
}

/// Initial pilot step: `config.dt` is read as the step at `zeta = 1` and moved to
/// the tempered scale (`zeta` for first-order samplers, `sqrt(zeta)` for leapfrog).
pub fn scaled_initial_step(config: &ChainConfig) -> f64 {
    match config.sampler {
        SamplerKind::Hmc => config.dt * config.zeta.sqrt(),
        _ => config.dt * config.zeta,
    }
}

/// Bracket search on the step size over pilot chains sharing one seed.
///
/// Doubles or halves until the target band is bracketed, then bisects geometrically.
/// Returns the best pilot if the band is not reached within `max_pilots`.
pub fn tune_with<F: FnMut(f64) -> Result<f64>>(
    mut acceptance: F,
    start: f64,
    tune: &TuneConfig,
) -> Result<TuneResult> {
    if !(start > 0.0 && start.is_finite()) {
        return Err(AmvError::InvalidParameter(format!(
            "initial step must be positive, got {start}"
        )));
    }
    if !(tune.low < tune.high) || tune.max_pilots == 0 {
        return Err(AmvError::InvalidParameter(
            "empty acceptance band or pilot budget".into(),
        ));
    }
    let centre = 0.5 * (tune.low + tune.high);
    let mut small: Option<f64> = None;
    let mut large: Option<f64> = None;
    let mut best = TuneResult {
        dt: start,
        acceptance: f64::NAN,
        pilots: 0,
        in_band: false,
    };
    let mut dt = start;
    for pilot in 1..=tune.max_pilots {
        let a = acceptance(dt)?;
        if best.acceptance.is_nan() || (a - centre).abs() < (best.acceptance - centre).abs() {
            best = TuneResult {
                dt,
                acceptance: a,
                pilots: pilot,
                in_band: false,
            };
        }
        best.pilots = pilot;
        if a >= tune.low && a <= tune.high {
            return Ok(TuneResult {
                dt,
                acceptance: a,
                pilots: pilot,
                in_band: true,
            });
        }
        if a > tune.high {
            small = Some(dt);
        } else {
            large = Some(dt);
        }
        dt = match (small, large) {
            (Some(s), Some(l)) => (s * l).sqrt(),
            (Some(s), None) => 2.0 * s,
            (None, Some(l)) => 0.5 * l,
            (None, None) => unreachable!(),
        };
    }
    log::warn!(
        "step size search did not reach [{}, {}] in {} pilots; using dt = {:e} (acceptance {:.3})",
        tune.low,
        tune.high,
        tune.max_pilots,
        best.dt,
        best.acceptance
    );
    Ok(best)
}

pub fn tune_step_size_target<T: Target + ?Sized>(
    target: &T,
    precond: &dyn Preconditioner,
    config: &ChainConfig,
    theta_init: &[f64],
    tune: &TuneConfig,
) -> Result<TuneResult> {
    config.validate()?;
    let pilot = |dt: f64| -> Result<f64> {
        let cfg = ChainConfig {
            dt,
            steps: tune.pilot_steps,
            burn_in: Some(0),
            thin: 1,
            chains: 1,
            ..config.clone()
        };
        Ok(
            run_single_chain(target, precond, &cfg, theta_init, 0, false)?
                .stats
                .acceptance_rate(),
        )
    };
    tune_with(pilot, scaled_initial_step(config), tune)
}

/// Step size for `config.sampler` on the tempered posterior reaching the target acceptance band.
pub fn tune_step_size(
    y: &ObservationSet,
    params: &ModelParams,
    config: &ChainConfig,
    theta_init: &StateVector,
    tune: &TuneConfig,
) -> Result<TuneResult> {
    let post = Posterior::new(y.clone(), *params)?;
    tune_posterior_step_size(&post, config, theta_init, tune)
}

pub fn tune_posterior_step_size(
    post: &Posterior,
    config: &ChainConfig,
    theta_init: &StateVector,
    tune: &TuneConfig,
) -> Result<TuneResult> {
    let precond = posterior_preconditioner(post, config)?;
    tune_step_size_target(post, precond.as_ref(), config, theta_init.as_slice(), tune)
}
