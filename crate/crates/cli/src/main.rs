use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amv_core::bench::generate_seeded;
use amv_core::energy::Posterior;
use amv_core::io;
use amv_core::laplace::{assemble_posterior_hessian, laplace_error_map_with, LocalSolver};
use amv_core::mcmc::{
    run_posterior_chain, tune_posterior_step_size, ChainConfig, SamplerKind, TuneConfig,
};
use amv_core::optim::{default_init, estimate_posterior_map};
use amv_core::pipeline::{bundled_config, fill_undefined, run_pipeline, PipelineConfig};
use amv_core::uq::{criteria_suite, EpeReport, ExpectedErrorMap, ObservableKind, ObservableSet};
use amv_core::{ObservationSet, StateVector};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

const Y_T0: &str = "y_t0.amv";
const Y_T1: &str = "y_t1.amv";
const MASK: &str = "mask.amv";

#[derive(Parser)]
#[command(
    name = "amv",
    version,
    about = "Displacement estimation with per-pixel uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (truth and observations).
    Synth(SynthArgs),
    /// MAP estimate of displacement and image.
    Map(MapArgs),
    /// Local Laplace expected-error map around a MAP estimate.
    Laplace(LaplaceArgs),
    /// Run an MCMC chain on the (tempered) posterior.
    Sample(SampleArgs),
    /// Endpoint-error criteria for an estimate against a ground truth.
    Evaluate(EvaluateArgs),
    /// Synthetic data, MAP, Laplace and tempered/untempered HMC in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// key=value configuration; the bundled 32x32 benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            None => Ok(bundled_config()),
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                PipelineConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

#[derive(Args)]
struct DataArg {
    /// Directory holding y_t0.amv, y_t1.amv and mask.amv.
    #[arg(long)]
    data: PathBuf,
}

impl DataArg {
    fn load(&self) -> Result<ObservationSet> {
        let d = &self.data;
        io::read_observations(&d.join(Y_T0), &d.join(Y_T1), &d.join(MASK))
            .with_context(|| format!("reading observations from {}", d.display()))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArg,
    /// Starting state; zero displacement and the observed image otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LaplaceArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    radius: Option<f64>,
    /// Hessian band radius in pixels; dense coupling when omitted.
    #[arg(long)]
    band_radius: Option<f64>,
    /// Ground-truth state; adds an EPE report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Rw,
    Prw,
    Mala,
    Hmc,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Rw => SamplerKind::Rw,
            SamplerArg::Prw => SamplerKind::PrecondRw,
            SamplerArg::Mala => SamplerKind::Mala,
            SamplerArg::Hmc => SamplerKind::Hmc,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArg,
    /// Chain start, usually the MAP.
    #[arg(long)]
    init: PathBuf,
    #[arg(long, value_enum, default_value = "hmc")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 1e-6)]
    zeta: f64,
    /// Step size; the tuning start when --tune is given.
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    leapfrog: usize,
    /// Preconditioner Hurst exponent; half the prior exponent by default.
    #[arg(long)]
    hurst_precond: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    /// Search a step size with acceptance in [0.85, 0.95] before sampling.
    #[arg(long)]
    tune: bool,
    #[arg(long, default_value_t = 20)]
    pilot_steps: usize,
    /// Ground-truth state; adds an EPE report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Single-channel displacement expected-error map.
    #[arg(long)]
    error: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "estimate")]
    method: String,
    /// CSV destination; stdout only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn read_state(p: &Path) -> Result<StateVector> {
    io::read_state(p).with_context(|| format!("reading {}", p.display()))
}

fn error_map_from_file(p: &Path) -> Result<ExpectedErrorMap> {
    let (grid, channels, values) =
        io::read_map(p).with_context(|| format!("reading {}", p.display()))?;
    if channels != 1 {
        bail!(
            "{} holds {channels} channels, expected a single expected-error map",
            p.display()
        );
    }
    Ok(ExpectedErrorMap {
        rows: grid.rows(),
        cols: grid.cols(),
        kind: ObservableKind::Displacement,
        values,
    })
}

fn epe_report(
    truth: &StateVector,
    estimate: &StateVector,
    e_hat: &ExpectedErrorMap,
    obs_mask: &amv_core::ObservationMask,
) -> Result<EpeReport> {
    let (d_true, _) = truth.unpack()?;
    let (d_est, _) = estimate.unpack()?;
    Ok(criteria_suite(
        &d_true,
        &d_est,
        &fill_undefined(e_hat),
        obs_mask,
    )?)
}

fn emit_csv(rows: &[(String, EpeReport)], path: Option<&Path>) -> Result<()> {
    print!("{}", io::epe_csv(rows));
    if let Some(p) = path {
        io::write_epe_csv(p, rows)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let (truth, obs) = generate_seeded(&cfg.bench)?;
    create_dir(&a.out)?;
    io::write_state(&a.out.join("truth.amv"), &truth)?;
    io::write_observations(
        &a.out.join(Y_T0),
        &a.out.join(Y_T1),
        &a.out.join(MASK),
        &obs,
    )?;
    io::write_summary(
        &a.out.join("dataset.json"),
        &json!({ "benchmark": cfg.bench, "observed_pixels": obs.mask.joint().iter().filter(|&&b| b).count() }),
    )?;
    log::info!("dataset written to {}", a.out.display());
    Ok(())
}

fn map(a: MapArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let obs = a.data.load()?;
    let init = match &a.init {
        Some(p) => read_state(p)?,
        None => default_init(&obs),
    };
    let post = Posterior::new(obs, cfg.model_params())?;
    let mut oc = cfg.optim_config();
    if let Some(n) = a.max_iterations {
        oc.max_iterations = n;
    }
    let (theta, diag) = estimate_posterior_map(&post, &oc, &init)?;
    io::write_state(&a.out, &theta)?;
    println!(
        "{}",
        json!({ "iterations": diag.iterations, "grad_norm": diag.grad_norm, "converged": diag.converged, "energy": diag.energy_trace.last() })
    );
    Ok(())
}

fn laplace(a: LaplaceArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let obs = a.data.load()?;
    let theta = read_state(&a.map)?;
    let radius = a.radius.unwrap_or(cfg.laplace_radius);
    let post = Posterior::new(obs.clone(), cfg.model_params())?;
    let h = assemble_posterior_hessian(&post, theta.as_slice(), a.band_radius.or(cfg.band_radius))?;
    let disp = ObservableSet::displacement(post.grid(), post.channels());
    let lm = laplace_error_map_with(&h, &disp, radius, LocalSolver::Cholesky)?;
    create_dir(&a.out)?;
    io::write_map(
        &a.out.join("laplace_upper.amv"),
        post.grid(),
        &[&lm.upper.values],
    )?;
    io::write_map(
        &a.out.join("laplace_lower.amv"),
        post.grid(),
        &[&lm.lower.values],
    )?;
    let mut summary = json!({ "radius": radius, "flagged": lm.flagged.len(), "upper": "laplace_upper.amv", "lower": "laplace_lower.amv" });
    if let Some(t) = &a.truth {
        let truth = read_state(t)?;
        let rows = vec![(
            "map_laplace".to_string(),
            epe_report(&truth, &theta, &lm.upper, &obs.mask)?,
        )];
        emit_csv(&rows, Some(&a.out.join("epe.csv")))?;
        summary["epe"] = json!("epe.csv");
    }
    io::write_summary(&a.out.join("summary.json"), &summary)?;
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let obs = a.data.load()?;
    let init = read_state(&a.init)?;
    let post = Posterior::new(obs.clone(), cfg.model_params())?;
    let mut chain = ChainConfig {
        sampler: a.sampler.into(),
        dt: a.dt,
        leapfrog: a.leapfrog,
        steps: a.steps,
        zeta: a.zeta,
        hurst_precond: a.hurst_precond.unwrap_or(cfg.bench.hurst_prior / 2.0),
        burn_in: a.burn_in,
        thin: 1,
        seed: a.seed,
        chains: a.chains,
    };
    chain.validate()?;
    let tuning = if a.tune {
        let t = tune_posterior_step_size(
            &post,
            &chain,
            &init,
            &TuneConfig {
                pilot_steps: a.pilot_steps,
                ..TuneConfig::default()
            },
        )?;
        chain.dt = t.dt;
        Some(t)
    } else {
        None
    };
    let s = run_posterior_chain(&post, &chain, &init)?;
    create_dir(&a.out)?;
    let theta_hat = s.theta_hat_state(&init)?;
    io::write_state(&a.out.join("theta_hat.amv"), &theta_hat)?;
    io::write_map(
        &a.out.join("displacement_error.amv"),
        post.grid(),
        &[&s.displacement_error.values],
    )?;
    io::write_map(
        &a.out.join("displacement_jensen.amv"),
        post.grid(),
        &[&s.displacement_jensen.values],
    )?;
    let images: Vec<&[f64]> = s.image_error.iter().map(|m| m.values.as_slice()).collect();
    io::write_map(&a.out.join("image_error.amv"), post.grid(), &images)?;
    let mut summary = json!({
        "sampler": s.sampler.name(),
        "zeta": s.zeta,
        "dt": s.dt,
        "leapfrog": chain.leapfrog,
        "steps": chain.steps,
        "burn_in": chain.burn_in(),
        "hurst_precond": chain.hurst_precond,
        "seed": chain.seed,
        "chains": chain.chains,
        "samples": s.samples,
        "acceptance": s.acceptance,
        "stats": s.stats,
        "estimator": s.estimator,
        "tuning": tuning,
        "theta_hat": "theta_hat.amv",
        "displacement_error": "displacement_error.amv",
        "displacement_jensen": "displacement_jensen.amv",
        "image_error": "image_error.amv",
    });
    if let Some(t) = &a.truth {
        let truth = read_state(t)?;
        let rows = vec![(
            s.sampler.name().to_string(),
            epe_report(&truth, &theta_hat, &s.displacement_error, &obs.mask)?,
        )];
        io::write_epe_csv(&a.out.join("epe.csv"), &rows)?;
        summary["epe"] = json!("epe.csv");
    }
    io::write_summary(&a.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let truth = read_state(&a.truth)?;
    let estimate = read_state(&a.estimate)?;
    let e_hat = error_map_from_file(&a.error)?;
    let mask = io::read_mask(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    let rows = vec![(a.method, epe_report(&truth, &estimate, &e_hat, &mask)?)];
    emit_csv(&rows, a.out.as_deref())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let r = run_pipeline(&cfg)?;
    let out = &a.out;
    create_dir(out)?;
    let grid = r.truth.grid();
    io::write_state(&out.join("truth.amv"), &r.truth)?;
    io::write_observations(
        &out.join(Y_T0),
        &out.join(Y_T1),
        &out.join(MASK),
        &r.observations,
    )?;
    io::write_state(&out.join("map.amv"), &r.map)?;
    io::write_map(
        &out.join("laplace_upper.amv"),
        grid,
        &[&r.laplace.upper.values],
    )?;
    for (name, rep) in [
        ("hmc_tempered", &r.tempered),
        ("hmc_untempered", &r.untempered),
    ] {
        let theta_hat = rep.summary.theta_hat_state(&r.truth)?;
        io::write_state(&out.join(format!("{name}_theta_hat.amv")), &theta_hat)?;
        io::write_map(
            &out.join(format!("{name}_error.amv")),
            grid,
            &[&rep.summary.displacement_error.values],
        )?;
        io::write_map(
            &out.join(format!("{name}_jensen.amv")),
            grid,
            &[&rep.summary.displacement_jensen.values],
        )?;
    }
    let rows = r.epe_rows();
    emit_csv(&rows, Some(&out.join("epe.csv")))?;
    let chain = |rep: &amv_core::pipeline::ChainReport| {
        let s = &rep.summary;
        json!({ "zeta": s.zeta, "dt": s.dt, "acceptance": s.acceptance, "stats": s.stats, "samples": s.samples, "tuning": rep.tuning })
    };
    let summary = json!({
        "config": cfg,
        "map": {
            "iterations": r.map_diagnostics.iterations,
            "grad_norm": r.map_diagnostics.grad_norm,
            "converged": r.map_diagnostics.converged,
        },
        "laplace": { "radius": r.laplace.radius, "flagged": r.laplace.flagged.len() },
        "hmc_tempered": chain(&r.tempered),
        "hmc_untempered": chain(&r.untempered),
        "epe": "epe.csv",
        "seconds": r.seconds,
    });
    io::write_summary(&out.join("summary.json"), &summary)?;
    log::info!("pipeline finished in {:.1} s", r.seconds);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Map(a) => map(a),
        Command::Laplace(a) => laplace(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = amv_core::init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
