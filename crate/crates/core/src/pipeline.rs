//! End-to-end benchmark: MAP, local Laplace bound, tempered and untempered HMC,
//! and the endpoint-error table comparing them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{generate_seeded, BenchmarkConfig, KeyValues};
use crate::energy::{ModelParams, Posterior};
use crate::error::{AmvError, Result};
use crate::laplace::{
    assemble_posterior_hessian, laplace_error_map_with, LaplaceErrorMap, LocalSolver,
    DEFAULT_RADIUS,
};
use crate::mcmc::{
    run_posterior_chain, tune_posterior_step_size, ChainConfig, SampleSummary, SamplerKind,
    TuneConfig, TuneResult,
};
use crate::model::{ObservationSet, StateVector};
use crate::optim::{default_init, estimate_posterior_map, OptimConfig, OptimDiagnostics};
use crate::uq::{criteria_suite, EpeReport, ExpectedErrorMap, ObservableSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bench: BenchmarkConfig,
    pub zeta: f64,
    pub steps: usize,
    pub leapfrog: usize,
    /// Defaults to half the prior Hurst exponent.
    pub hurst_precond: Option<f64>,
    /// Starting step for the tuning search, at `zeta = 1`.
    pub dt: f64,
    pub tune: bool,
    pub pilot_steps: usize,
    pub chains: usize,
    pub laplace_radius: f64,
    pub band_radius: Option<f64>,
    pub map_iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bench: BenchmarkConfig::default(),
            zeta: 1e-6,
            steps: 100,
            leapfrog: 10,
            hurst_precond: None,
            dt: 0.05,
            tune: true,
            pilot_steps: 20,
            chains: 1,
            laplace_radius: DEFAULT_RADIUS,
            band_radius: None,
            map_iterations: 3000,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let bench = BenchmarkConfig::from_key_values(&mut kv)?;
        let d = Self::default();
        let cfg = Self {
            bench,
            zeta: kv.take_or("zeta", d.zeta)?,
            steps: kv.take_or("steps", d.steps)?,
            leapfrog: kv.take_or("leapfrog", d.leapfrog)?,
            hurst_precond: kv.take("hurst_precond")?,
            dt: kv.take_or("dt", d.dt)?,
            tune: kv.take_or("tune", d.tune)?,
            pilot_steps: kv.take_or("pilot_steps", d.pilot_steps)?,
            chains: kv.take_or("chains", d.chains)?,
            laplace_radius: kv.take_or("laplace_radius", d.laplace_radius)?,
            band_radius: kv.take("band_radius")?,
            map_iterations: kv.take_or("map_iterations", d.map_iterations)?,
        };
        kv.finish()?;
        cfg.chain_config(cfg.zeta, cfg.dt).validate()?;
        Ok(cfg)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.bench.seed = seed;
        c
    }

    pub fn hurst_precond(&self) -> f64 {
        self.hurst_precond.unwrap_or(self.bench.hurst_prior / 2.0)
    }

    pub fn model_params(&self) -> ModelParams {
        self.bench.model_params()
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            max_iterations: self.map_iterations,
            ..OptimConfig::default()
        }
    }

    pub fn chain_config(&self, zeta: f64, dt: f64) -> ChainConfig {
        ChainConfig {
            sampler: SamplerKind::Hmc,
            dt,
            leapfrog: self.leapfrog,
            steps: self.steps,
            zeta,
            hurst_precond: self.hurst_precond(),
            burn_in: None,
            thin: 1,
            seed: self.bench.seed,
            chains: self.chains,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainReport {
    pub summary: SampleSummary,
    pub tuning: Option<TuneResult>,
    pub epe: EpeReport,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub truth: StateVector,
    pub observations: ObservationSet,
    pub map: StateVector,
    pub map_diagnostics: OptimDiagnostics,
    pub laplace: LaplaceErrorMap,
    pub laplace_epe: EpeReport,
    pub tempered: ChainReport,
    pub untempered: ChainReport,
    pub seconds: f64,
}

impl PipelineResult {
    pub fn epe_rows(&self) -> Vec<(String, EpeReport)> {
        vec![
            ("map_laplace".to_string(), self.laplace_epe),
            ("hmc_tempered".to_string(), self.tempered.epe),
            ("hmc_untempered".to_string(), self.untempered.epe),
        ]
    }
}

/// Expected-error map usable as weights: undefined entries replaced by the largest defined one.
pub fn fill_undefined(map: &ExpectedErrorMap) -> ExpectedErrorMap {
    let max = map
        .values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let mut out = map.clone();
    let mut filled = 0;
    for v in out.values.iter_mut().filter(|v| !v.is_finite()) {
        *v = max;
        filled += 1;
    }
    if filled > 0 {
        log::warn!("{filled} undefined expected errors replaced by {max:e}");
    }
    out
}

fn evaluate(
    truth: &StateVector,
    estimate: &[f64],
    e_hat: &ExpectedErrorMap,
    obs: &ObservationSet,
) -> Result<EpeReport> {
    let est = StateVector::from_vec(truth.grid(), truth.channels(), estimate.to_vec())?;
    let (d_true, _) = truth.unpack()?;
    let (d_est, _) = est.unpack()?;
    criteria_suite(&d_true, &d_est, &fill_undefined(e_hat), &obs.mask)
}

/// Tune (optionally) and run HMC at temperature `zeta` from `init`.
pub fn sample_stage(
    post: &Posterior,
    cfg: &PipelineConfig,
    zeta: f64,
    init: &StateVector,
) -> Result<(SampleSummary, Option<TuneResult>)> {
    let base = cfg.chain_config(zeta, cfg.dt);
    let tuning = if cfg.tune {
        let tune = TuneConfig {
            pilot_steps: cfg.pilot_steps,
            ..TuneConfig::default()
        };
        Some(tune_posterior_step_size(post, &base, init, &tune)?)
    } else {
        None
    };
    let dt = tuning.map(|t| t.dt).unwrap_or(cfg.dt);
    let summary = run_posterior_chain(post, &ChainConfig { dt, ..base }, init)?;
    Ok((summary, tuning))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineResult> {
    let start = Instant::now();
    let (truth, obs) = generate_seeded(&cfg.bench)?;
    let post = Posterior::new(obs.clone(), cfg.model_params())?;

    let (map, map_diagnostics) =
        estimate_posterior_map(&post, &cfg.optim_config(), &default_init(&obs))?;
    log::info!(
        "MAP: {} iterations, |g| = {:e}, converged = {}",
        map_diagnostics.iterations,
        map_diagnostics.grad_norm,
        map_diagnostics.converged
    );

    let h = assemble_posterior_hessian(&post, map.as_slice(), cfg.band_radius)?;
    let disp = ObservableSet::displacement(post.grid(), post.channels());
    let laplace = laplace_error_map_with(&h, &disp, cfg.laplace_radius, LocalSolver::Cholesky)?;
    let laplace_epe = evaluate(&truth, map.as_slice(), &laplace.upper, &obs)?;

    let mut reports = Vec::with_capacity(2);
    for zeta in [cfg.zeta, 1.0] {
        let (summary, tuning) = sample_stage(&post, cfg, zeta, &map)?;
        log::info!(
            "HMC zeta = {zeta:e}: dt = {:e}, acceptance {:.3}",
            summary.dt,
            summary.acceptance
        );
        let epe = evaluate(
            &truth,
            &summary.theta_hat,
            &summary.displacement_error,
            &obs,
        )?;
        reports.push(ChainReport {
            summary,
            tuning,
            epe,
        });
    }
    let untempered = reports.pop().ok_or(AmvError::EmptyDomain)?;
    let tempered = reports.pop().ok_or(AmvError::EmptyDomain)?;
    Ok(PipelineResult {
        truth,
        observations: obs,
        map,
        map_diagnostics,
        laplace,
        laplace_epe,
        tempered,
        untempered,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The bundled 32x32 benchmark configuration.
pub const BUNDLED_CONFIG: &str = include_str!("../../../configs/bench32.conf");

pub fn bundled_config() -> PipelineConfig {
    PipelineConfig::parse(BUNDLED_CONFIG).expect("bundled configuration parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::MaskKind;

    #[test]
    fn parse_pipeline_keys() {
        let c = PipelineConfig::parse("grid = 16\nzeta = 1e-4\nsteps = 30\nhurst_prior = 0.8\n")
            .unwrap();
        assert_eq!(c.zeta, 1e-4);
        assert_eq!(c.steps, 30);
        assert_eq!(c.hurst_precond(), 0.4);
        assert!(PipelineConfig::parse("zeta = 2").is_err());
        assert!(PipelineConfig::parse("sampler = hmc").is_err());
        let b = bundled_config();
        assert_eq!((b.bench.rows, b.bench.cols), (32, 32));
        assert_eq!(b.steps * b.leapfrog, 1000);
        assert!(matches!(b.bench.mask, MaskKind::Disks { .. }));
    }

    #[test]
    fn fill_replaces_nan_with_max() {
        let m = ExpectedErrorMap {
            rows: 2,
            cols: 2,
            kind: crate::uq::ObservableKind::Displacement,
            values: vec![1.0, f64::NAN, 3.0, 2.0],
        };
        assert_eq!(fill_undefined(&m).values, vec![1.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn small_pipeline_runs_and_is_deterministic() {
        let cfg = PipelineConfig::parse("grid = 8\nmask = disks\ncoverage = 0.8\ndisk_radius = 1.5\nsteps = 20\nleapfrog = 3\npilot_steps = 5\nseed = 2\n").unwrap();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(
            crate::io::epe_csv(&a.epe_rows()),
            crate::io::epe_csv(&b.epe_rows())
        );
        assert_eq!(a.tempered.summary.zeta, 1e-6);
        assert_eq!(a.untempered.summary.zeta, 1.0);
        assert!(a
            .epe_rows()
            .iter()
            .all(|(_, r)| r.values().iter().all(|v| v.is_finite() && *v >= 0.0)));
    }
}
