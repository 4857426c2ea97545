//! Metropolis-Hastings samplers for tempered targets `U / zeta`, with posterior
//! mean and expected-error estimates mapped back to `zeta = 1`.

mod chain;
mod gaussian;
mod kernels;
mod precond;
mod tune;

pub use chain::{
    posterior_preconditioner, run_chain, run_posterior_chain, run_single_chain, run_target_chains,
    ChainConfig, ChainRun, ErrorEstimator, SampleSummary, SamplerKind, MAX_STORED_VALUES,
};
pub use gaussian::GaussianTarget;
pub use kernels::{
    hmc_step, kinetic, leapfrog, mala_log_ratio, mala_step, mh_accept, rw_propose, rw_step,
    ChainState, ChainStats, StepOutcome, Trajectory, DIVERGENCE_THRESHOLD,
};
pub use precond::{DenseCov, FbmPrecond, Identity, Preconditioner};
pub use tune::{
    scaled_initial_step, tune_posterior_step_size, tune_step_size, tune_step_size_target,
    tune_with, TuneConfig, TuneResult,
};

#[cfg(test)]
mod tests;
