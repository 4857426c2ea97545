use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{hmc_step, mala_step, rw_step, ChainState, ChainStats};
use super::precond::{FbmPrecond, Identity, Preconditioner};
use crate::energy::{check_zeta, ModelParams, Posterior, Target, Tempered};
use crate::error::{AmvError, Result};
use crate::model::{ObservationSet, StateVector};
use crate::uq::{ExpectedErrorMap, ObservableSet};

/// Upper bound on `kept samples x dimension` held in memory for two-pass estimates.
pub const MAX_STORED_VALUES: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Rw,
    PrecondRw,
    Mala,
    Hmc,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Rw => "rw",
            SamplerKind::PrecondRw => "prw",
            SamplerKind::Mala => "mala",
            SamplerKind::Hmc => "hmc",
        }
    }

    pub fn uses_gradient(&self) -> bool {
        matches!(self, SamplerKind::Mala | SamplerKind::Hmc)
    }

    pub fn is_preconditioned(&self) -> bool {
        !matches!(self, SamplerKind::Rw)
    }
}

impl FromStr for SamplerKind {
    type Err = AmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rw" => Ok(SamplerKind::Rw),
            "prw" | "precond_rw" => Ok(SamplerKind::PrecondRw),
            "mala" => Ok(SamplerKind::Mala),
            "hmc" => Ok(SamplerKind::Hmc),
            other => Err(AmvError::InvalidParameter(format!(
                "unknown sampler '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub sampler: SamplerKind,
    /// Step size; the leapfrog step for HMC.
    pub dt: f64,
    pub leapfrog: usize,
    /// Iterations after burn-in.
    pub steps: usize,
    pub zeta: f64,
    pub hurst_precond: f64,
    /// Defaults to `steps / 10`.
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Hmc,
            dt: 1e-2,
            leapfrog: 10,
            steps: 1000,
            zeta: 1.0,
            hurst_precond: 0.5,
            burn_in: None,
            thin: 1,
            seed: 0,
            chains: 1,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(AmvError::InvalidParameter(format!(
                "step size must be positive, got {}",
                self.dt
            )));
        }
        if self.leapfrog == 0 || self.steps == 0 || self.thin == 0 || self.chains == 0 {
            return Err(AmvError::InvalidParameter(
                "leapfrog, steps, thin and chains must be at least 1".into(),
            ));
        }
        if !(self.hurst_precond > 0.0) {
            return Err(AmvError::InvalidParameter(format!(
                "H_precond must be positive, got {}",
                self.hurst_precond
            )));
        }
        check_zeta(self.zeta)
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.steps / 10)
    }

    pub fn kept(&self) -> usize {
        self.steps.div_ceil(self.thin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorEstimator {
    TwoPass,
    Jensen,
}

/// Pooled output of one or more chains on the tempered target.
///
/// Sums are taken around `shift` to limit cancellation in the variance.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub zeta: f64,
    pub shift: Vec<f64>,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub count: usize,
    /// Kept draws, one per row, when storage was affordable.
    pub samples: Option<Vec<Vec<f64>>>,
    pub stats: ChainStats,
    pub final_states: Vec<Vec<f64>>,
}

impl ChainRun {
    pub fn mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.shift
            .iter()
            .zip(&self.sum)
            .map(|(s, t)| s + t / n)
            .collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s1, s2)| (s2 / n - (s1 / n) * (s1 / n)).max(0.0))
            .collect()
    }

    pub fn estimator(&self) -> ErrorEstimator {
        if self.samples.is_some() {
            ErrorEstimator::TwoPass
        } else {
            ErrorEstimator::Jensen
        }
    }

    /// `(1 / (N sqrt(zeta))) sum_i |psi(theta_i) - psi(theta_hat)|` per coordinate group.
    pub fn two_pass_errors(&self, groups: &[Vec<usize>]) -> Option<Vec<f64>> {
        let samples = self.samples.as_ref()?;
        let mean = self.mean();
        let scale = 1.0 / (samples.len() as f64 * self.zeta.sqrt());
        Some(
            groups
                .par_iter()
                .map(|g| {
                    let total: f64 = samples
                        .iter()
                        .map(|t| {
                            g.iter()
                                .map(|&i| (t[i] - mean[i]).powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .sum();
                    total * scale
                })
                .collect(),
        )
    }

    /// Online upper bound `sqrt(sum of variances) / sqrt(zeta)` per group.
    pub fn jensen_errors(&self, groups: &[Vec<usize>]) -> Vec<f64> {
        let var = self.variance();
        let f = 1.0 / self.zeta.sqrt();
        groups
            .iter()
            .map(|g| g.iter().map(|&i| var[i]).sum::<f64>().sqrt() * f)
            .collect()
    }

    pub fn expected_errors(&self, groups: &[Vec<usize>]) -> Vec<f64> {
        self.two_pass_errors(groups)
            .unwrap_or_else(|| self.jensen_errors(groups))
    }

    fn merge(mut self, other: ChainRun) -> ChainRun {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.count += other.count;
        self.samples = match (self.samples, other.samples) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            _ => None,
        };
        self.stats.merge(&other.stats);
        self.final_states.extend(other.final_states);
        self
    }
}

/// One sequential chain on `target / zeta` started from `theta_init`.
pub fn run_single_chain<T: Target + ?Sized>(
    target: &T,
    precond: &dyn Preconditioner,
    config: &ChainConfig,
    theta_init: &[f64],
    chain: u64,
    store: bool,
) -> Result<ChainRun> {
    config.validate()?;
    let tempered = Tempered::new(target, config.zeta)?;
    let n = tempered.dim();
    if precond.dim() != n {
        return Err(AmvError::DimensionMismatch {
            expected: n,
            actual: precond.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain);
    let mut state = ChainState::new(&tempered, theta_init.to_vec())?;

    let identity = Identity { dim: n };
    let burn = config.burn_in();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut samples = store.then(|| Vec::with_capacity(config.kept()));
    let mut count = 0;
    for i in 0..burn + config.steps {
        match config.sampler {
            SamplerKind::Rw => rw_step(&mut rng, &tempered, Some(&identity), &mut state, config.dt),
            SamplerKind::PrecondRw => {
                rw_step(&mut rng, &tempered, Some(precond), &mut state, config.dt)
            }
            SamplerKind::Mala => mala_step(&mut rng, &tempered, precond, &mut state, config.dt),
            SamplerKind::Hmc => hmc_step(
                &mut rng,
                &tempered,
                precond,
                &mut state,
                config.dt,
                config.leapfrog,
            ),
        };
        if i < burn || (i - burn) % config.thin != 0 {
            continue;
        }
        for j in 0..n {
            let v = state.theta[j] - theta_init[j];
            sum[j] += v;
            sum_sq[j] += v * v;
        }
        if let Some(s) = samples.as_mut() {
            s.push(state.theta.clone());
        }
        count += 1;
    }
    Ok(ChainRun {
        zeta: config.zeta,
        shift: theta_init.to_vec(),
        sum,
        sum_sq,
        count,
        samples,
        stats: state.stats,
        final_states: vec![state.theta],
    })
}

/// `config.chains` independent chains, one RNG stream each, pooled afterwards.
pub fn run_target_chains<T: Target + ?Sized>(
    target: &T,
    precond: &dyn Preconditioner,
    config: &ChainConfig,
    theta_init: &[f64],
) -> Result<ChainRun> {
    config.validate()?;
    let store = config
        .kept()
        .saturating_mul(config.chains)
        .saturating_mul(theta_init.len())
        <= MAX_STORED_VALUES;
    let runs: Vec<Result<ChainRun>> = (0..config.chains as u64)
        .into_par_iter()
        .map(|c| run_single_chain(target, precond, config, theta_init, c, store))
        .collect();
    let mut pooled: Option<ChainRun> = None;
    for r in runs {
        let r = r?;
        pooled = Some(match pooled {
            Some(p) => p.merge(r),
            None => r,
        });
    }
    Ok(pooled.expect("at least one chain"))
}

/// Preconditioner used for `sampler` on a posterior.
pub fn posterior_preconditioner(
    post: &Posterior,
    config: &ChainConfig,
) -> Result<Box<dyn Preconditioner>> {
    let n = post.dim();
    if config.sampler.is_preconditioned() {
        Ok(Box::new(FbmPrecond::new(
            post.grid(),
            post.channels(),
            config.hurst_precond,
        )?))
    } else {
        Ok(Box::new(Identity { dim: n }))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub theta_hat: Vec<f64>,
    pub displacement_error: ExpectedErrorMap,
    pub image_error: Vec<ExpectedErrorMap>,
    pub displacement_jensen: ExpectedErrorMap,
    pub image_jensen: Vec<ExpectedErrorMap>,
    pub estimator: ErrorEstimator,
    pub acceptance: f64,
    pub stats: ChainStats,
    pub samples: usize,
    pub sampler: SamplerKind,
    pub zeta: f64,
    pub dt: f64,
}

impl SampleSummary {
    pub fn from_run(post: &Posterior, config: &ChainConfig, run: &ChainRun) -> Result<Self> {
        let g = post.grid();
        let k = post.channels();
        let disp = ObservableSet::displacement(g, k);
        let disp_groups = disp.groups();
        let images: Vec<ObservableSet> = (0..k)
            .map(|c| ObservableSet::image(g, k, c))
            .collect::<Result<_>>()?;
        let map =
            |set: &ObservableSet, vals: Vec<f64>| ExpectedErrorMap::from_observables(set, &vals);
        Ok(Self {
            theta_hat: run.mean(),
            displacement_error: map(&disp, run.expected_errors(&disp_groups)),
            image_error: images
                .iter()
                .map(|s| map(s, run.expected_errors(&s.groups())))
                .collect(),
            displacement_jensen: map(&disp, run.jensen_errors(&disp_groups)),
            image_jensen: images
                .iter()
                .map(|s| map(s, run.jensen_errors(&s.groups())))
                .collect(),
            estimator: run.estimator(),
            acceptance: run.stats.acceptance_rate(),
            stats: run.stats,
            samples: run.count,
            sampler: config.sampler,
            zeta: config.zeta,
            dt: config.dt,
        })
    }

    pub fn theta_hat_state(&self, template: &StateVector) -> Result<StateVector> {
        StateVector::from_vec(template.grid(), template.channels(), self.theta_hat.clone())
    }
}

pub fn run_posterior_chain(
    post: &Posterior,
    config: &ChainConfig,
    theta_init: &StateVector,
) -> Result<SampleSummary> {
    if theta_init.len() != post.dim() {
        return Err(AmvError::DimensionMismatch {
            expected: post.dim(),
            actual: theta_init.len(),
        });
    }
    let precond = posterior_preconditioner(post, config)?;
    let run = run_target_chains(post, precond.as_ref(), config, theta_init.as_slice())?;
    SampleSummary::from_run(post, config, &run)
}

/// Sample the tempered posterior of `y` from `theta_init` (typically the MAP).
pub fn run_chain(
    y: &ObservationSet,
    params: &ModelParams,
    config: &ChainConfig,
    theta_init: &StateVector,
) -> Result<SampleSummary> {
    let post = Posterior::new(y.clone(), *params)?;
    run_posterior_chain(&post, config, theta_init)
}
