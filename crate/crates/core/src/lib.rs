//! Joint estimation of displacement fields and latent images from partially
//! observed image pairs, with per-pixel uncertainty from tempered MCMC and a
//! local Laplace approximation.

pub mod bench;
pub mod energy;
pub mod error;
pub mod fbm;
pub mod io;
pub mod laplace;
pub mod mcmc;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod spline;
pub mod uq;
pub mod wavelet;

pub use error::{AmvError, Result};
pub use model::{
    pack_state, residual, DisplacementField, ImageStack, ObservationMask, ObservationSet,
    PixelGrid, ResidualVector, StateVector,
};

/// Size the global thread pool from `AMV_THREADS` when set. Call before any parallel work.
pub fn init_thread_pool() -> Result<()> {
    let Ok(v) = std::env::var("AMV_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        AmvError::InvalidParameter(format!("AMV_THREADS must be a positive integer, got '{v}'"))
    })?;
    if n == 0 {
        return Err(AmvError::InvalidParameter(
            "AMV_THREADS must be at least 1".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| AmvError::InvalidParameter(format!("thread pool: {e}")))
}
