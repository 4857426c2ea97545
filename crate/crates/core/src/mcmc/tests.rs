use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::energy::{ModelParams, Posterior, Target};
use crate::model::{ImageStack, ObservationMask, ObservationSet, PixelGrid, StateVector};

fn cov2() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5])
}

/// Batch-means standard error of the mean of a correlated series.
fn batch_se(xs: &[f64], batches: usize) -> f64 {
    let b = xs.len() / batches;
    let means: Vec<f64> = xs
        .chunks(b)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / b as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

struct Quartic;

impl Target for Quartic {
    fn dim(&self) -> usize {
        3
    }

    fn energy(&self, t: &[f64]) -> f64 {
        t.iter()
            .map(|v| 0.25 * v.powi(4) + 0.5 * v * v)
            .sum::<f64>()
            + 0.3 * t[0] * t[1]
    }

    fn energy_and_gradient(&self, t: &[f64]) -> (f64, Vec<f64>) {
        let mut g: Vec<f64> = t.iter().map(|v| v.powi(3) + v).collect();
        g[0] += 0.3 * t[1];
        g[1] += 0.3 * t[0];
        (self.energy(t), g)
    }
}

#[test]
fn mh_accept_limits_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        assert_eq!(mh_accept(&mut rng, 0.0), (true, false));
        assert_eq!(mh_accept(&mut rng, f64::NEG_INFINITY), (false, false));
        assert_eq!(mh_accept(&mut rng, f64::NAN), (false, true));
    }
    let n = 100_000;
    let acc = (0..n)
        .filter(|_| mh_accept(&mut rng, 0.5f64.ln()).0)
        .count();
    assert!((acc as f64 / n as f64 - 0.5).abs() < 0.005);
}

#[test]
fn sampler_names_parse() {
    for (s, k) in [
        ("rw", SamplerKind::Rw),
        ("prw", SamplerKind::PrecondRw),
        ("MALA", SamplerKind::Mala),
        ("hmc", SamplerKind::Hmc),
    ] {
        assert_eq!(s.parse::<SamplerKind>().unwrap(), k);
    }
    assert!("nuts".parse::<SamplerKind>().is_err());
}

#[test]
fn config_validation() {
    let ok = ChainConfig::default();
    assert!(ok.validate().is_ok());
    assert_eq!(
        ChainConfig {
            steps: 50,
            ..ok.clone()
        }
        .burn_in(),
        5
    );
    for bad in [
        ChainConfig {
            dt: 0.0,
            ..ok.clone()
        },
        ChainConfig {
            leapfrog: 0,
            ..ok.clone()
        },
        ChainConfig {
            steps: 0,
            ..ok.clone()
        },
        ChainConfig {
            zeta: 0.0,
            ..ok.clone()
        },
        ChainConfig {
            zeta: 1.5,
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn rw_proposal_small_step_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = vec![1.0, -2.0, 3.0];
    let tiny = rw_propose(&mut rng, &theta, 1e-20, None);
    assert!(tiny.iter().zip(&theta).all(|(a, b)| (a - b).abs() < 1e-8));
    let n = 10_000;
    let mut mean = [0.0; 3];
    for _ in 0..n {
        let p = rw_propose(&mut rng, &theta, 0.25, None);
        for i in 0..3 {
            mean[i] += p[i] / n as f64;
        }
    }
    for i in 0..3 {
        assert!((mean[i] - theta[i]).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }
}

/// Covariance of the fBm displacement prior between two pixels, by explicit cosine sum.
fn fbm_cov_oracle(g: PixelGrid, h: f64, a: usize, b: usize) -> f64 {
    let (ra, ca) = g.position(a);
    let (rb, cb) = g.position(b);
    let (dy, dx) = (ra as f64 - rb as f64, ca as f64 - cb as f64);
    let mut sum = 0.0;
    for kr in 0..g.rows() {
        for kc in 0..g.cols() {
            if kr == 0 && kc == 0 {
                continue;
            }
            let fr = if kr >= g.rows() / 2 {
                kr as f64 - g.rows() as f64
            } else {
                kr as f64
            };
            let fc = if kc >= g.cols() / 2 {
                kc as f64 - g.cols() as f64
            } else {
                kc as f64
            };
            let wy = 2.0 * std::f64::consts::PI * fr / g.rows() as f64;
            let wx = 2.0 * std::f64::consts::PI * fc / g.cols() as f64;
            let w2 = wx * wx + wy * wy;
            sum += w2.powf(-(h + 1.0)) * (wx * dx + wy * dy).cos();
        }
    }
    sum / g.len() as f64
}

#[test]
fn preconditioned_rw_covariance_matches_oracle() {
    let g = PixelGrid::square(8).unwrap();
    let m = g.len();
    let h = 0.5;
    let p = FbmPrecond::new(g, 1, h).unwrap();
    let dt = 0.3;
    let theta = vec![0.0; 3 * m];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = [(0usize, 0usize), (0, 1), (0, 9), (5, 40), (63, 0)];
    let n = 20_000;
    let mut acc = vec![0.0; pairs.len()];
    let mut cross = 0.0;
    let mut img = 0.0;
    for _ in 0..n {
        let v = rw_propose(&mut rng, &theta, dt, Some(&p as &dyn Preconditioner));
        for (k, &(a, b)) in pairs.iter().enumerate() {
            acc[k] += v[a] * v[b];
        }
        cross += v[0] * v[m];
        img += v[2 * m + 7] * v[2 * m + 7];
    }
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let caa = dt * fbm_cov_oracle(g, h, a, a);
        let cbb = dt * fbm_cov_oracle(g, h, b, b);
        let cab = dt * fbm_cov_oracle(g, h, a, b);
        let se = ((caa * cbb + cab * cab) / n as f64).sqrt();
        let est = acc[k] / n as f64;
        assert!((est - cab).abs() < 5.0 * se, "pair {a},{b}: {est} vs {cab}");
    }
    let c00 = dt * fbm_cov_oracle(g, h, 0, 0);
    assert!((cross / n as f64).abs() < 5.0 * c00 / (n as f64).sqrt());
    assert!((img / n as f64 - dt).abs() < 5.0 * dt * (2.0 / n as f64).sqrt());
}

#[test]
fn factor_relations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = PixelGrid::square(8).unwrap();
    let fbm = FbmPrecond::new(g, 2, 0.7).unwrap();
    let dense = DenseCov::new(cov2()).unwrap();
    let pcs: [&dyn Preconditioner; 3] = [&fbm, &dense, &Identity { dim: 5 }];
    for p in pcs {
        let n = p.dim();
        let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if n == fbm.dim() {
            // remove the zero modes the fBm factor annihilates
            let m = g.len();
            for b in 0..2 {
                let mean = z[b * m..(b + 1) * m].iter().sum::<f64>() / m as f64;
                z[b * m..(b + 1) * m].iter_mut().for_each(|v| *v -= mean);
            }
        }
        let lhs = p.apply(&p.apply_inv_sqrt(&z));
        let rhs = p.apply_sqrt(&z);
        let back = p.apply(&p.apply_inverse(&z));
        for i in 0..n {
            assert!((lhs[i] - rhs[i]).abs() < 1e-9 * (1.0 + rhs[i].abs()));
            assert!((back[i] - z[i]).abs() < 1e-9);
        }
    }
}

fn gaussian_moments(config: ChainConfig, precond: &dyn Preconditioner) {
    let cov = cov2();
    let target = GaussianTarget::from_covariance(cov.clone(), vec![0.0, 0.0]).unwrap();
    let run = run_single_chain(&target, precond, &config, &[0.5, -0.5], 0, true).unwrap();
    let samples = run.samples.as_ref().unwrap();
    let mean = run.mean();
    let var = run.variance();
    for i in 0..2 {
        let xs: Vec<f64> = samples.iter().map(|t| t[i]).collect();
        let se = batch_se(&xs, 50);
        assert!(
            mean[i].abs() < 4.0 * se,
            "{:?} mean {i}: {} (se {se})",
            config.sampler,
            mean[i]
        );
        let rel = (var[i] - cov[(i, i)]).abs() / cov[(i, i)];
        assert!(
            rel < 0.05,
            "{:?} variance {i}: {} vs {}",
            config.sampler,
            var[i],
            cov[(i, i)]
        );
    }
}

#[test]
fn samplers_recover_gaussian_moments() {
    let dense = DenseCov::new(cov2()).unwrap();
    let base = ChainConfig {
        steps: 100_000,
        burn_in: Some(1000),
        seed: 11,
        ..ChainConfig::default()
    };
    gaussian_moments(
        ChainConfig {
            sampler: SamplerKind::Mala,
            dt: 0.8,
            ..base.clone()
        },
        &dense,
    );
    gaussian_moments(
        ChainConfig {
            sampler: SamplerKind::Hmc,
            dt: 0.3,
            leapfrog: 5,
            ..base.clone()
        },
        &dense,
    );
    gaussian_moments(
        ChainConfig {
            sampler: SamplerKind::PrecondRw,
            dt: 1.0,
            ..base.clone()
        },
        &dense,
    );
    gaussian_moments(
        ChainConfig {
            sampler: SamplerKind::Rw,
            dt: 1.0,
            steps: 200_000,
            ..base
        },
        &Identity { dim: 2 },
    );
}

#[test]
fn mala_ratio_of_null_move_is_zero() {
    let dense = DenseCov::new(cov2()).unwrap();
    let t = [0.3, -1.2];
    let (u, g) = GaussianTarget::from_covariance(cov2(), vec![0.0; 2])
        .unwrap()
        .energy_and_gradient(&t);
    assert!(mala_log_ratio(&dense, 0.4, (&t, u, &g), (&t, u, &g)).abs() < 1e-14);
}

proptest! {
    #[test]
    fn mala_ratio_antisymmetric(a in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-2.0f64..2.0, 3), dt in 0.01f64..1.0) {
        let q = Quartic;
        let p = Identity { dim: 3 };
        let (ua, ga) = q.energy_and_gradient(&a);
        let (ub, gb) = q.energy_and_gradient(&b);
        let f = mala_log_ratio(&p, dt, (&a, ua, &ga), (&b, ub, &gb));
        let r = mala_log_ratio(&p, dt, (&b, ub, &gb), (&a, ua, &ga));
        prop_assert!((f + r).abs() < 1e-10 * (1.0 + f.abs()));
    }

    #[test]
    fn hmc_ratio_antisymmetric(a in prop::collection::vec(-1.5f64..1.5, 3), xi in prop::collection::vec(-1.5f64..1.5, 3), eps in 0.01f64..0.3, steps in 1usize..6) {
        let q = Quartic;
        let p = DenseCov::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.8, 0.1, 0.0, 0.1, 1.2])).unwrap();
        let (ua, ga) = q.energy_and_gradient(&a);
        let fwd = leapfrog(&q, &p, &a, &xi, &ga, eps, steps);
        let h0 = ua + kinetic(&p, &xi);
        let h1 = fwd.energy + kinetic(&p, &fwd.momentum);
        let neg: Vec<f64> = fwd.momentum.iter().map(|v| -v).collect();
        let back = leapfrog(&q, &p, &fwd.theta, &neg, &fwd.grad, eps, steps);
        let h2 = back.energy + kinetic(&p, &back.momentum);
        prop_assert!(((h0 - h1) + (h1 - h2)).abs() < 1e-10 * (1.0 + h0.abs()));
    }
}

#[test]
fn hmc_single_step_equals_mala() {
    let q = Quartic;
    let p = DenseCov::new(DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.2, 0.0, 0.2, 0.8, 0.1, 0.0, 0.1, 1.2],
    ))
    .unwrap();
    let dt = 0.5;
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let mut s1 = ChainState::new(&q, vec![0.2, 0.1, -0.4]).unwrap();
    let mut s2 = s1.clone();
    let mut decisions = 0;
    for _ in 0..2000 {
        let a = mala_step(&mut r1, &q, &p, &mut s1, dt);
        let b = hmc_step(&mut r2, &q, &p, &mut s2, dt.sqrt(), 1);
        assert_eq!(a.accepted, b.accepted);
        decisions += a.accepted as usize;
        for i in 0..3 {
            assert!((s1.theta[i] - s2.theta[i]).abs() < 1e-10);
        }
    }
    assert!(decisions > 100 && decisions < 2000);
}

#[test]
fn leapfrog_energy_error_is_second_order() {
    let target = GaussianTarget::from_covariance(cov2(), vec![0.0; 2]).unwrap();
    let p = Identity { dim: 2 };
    let theta = [1.0, -0.5];
    let xi = [0.7, 0.4];
    let (u, g) = target.energy_and_gradient(&theta);
    let h0 = u + kinetic(&p, &xi);
    let err = |eps: f64, steps: usize| {
        let t = leapfrog(&target, &p, &theta, &xi, &g, eps, steps);
        (t.energy + kinetic(&p, &t.momentum) - h0).abs()
    };
    let coarse = err(0.1, 10);
    let fine = err(0.05, 20);
    let ratio = coarse / fine;
    assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
}

#[test]
fn leapfrog_is_reversible() {
    let target = GaussianTarget::from_covariance(cov2(), vec![0.0; 2]).unwrap();
    let p = DenseCov::new(cov2()).unwrap();
    let theta = [1.0, -0.5];
    let (_, g) = target.energy_and_gradient(&theta);
    let xi = [0.3, -0.9];
    let fwd = leapfrog(&target, &p, &theta, &xi, &g, 0.2, 15);
    let neg: Vec<f64> = fwd.momentum.iter().map(|v| -v).collect();
    let back = leapfrog(&target, &p, &fwd.theta, &neg, &fwd.grad, 0.2, 15);
    for i in 0..2 {
        assert!((back.theta[i] - theta[i]).abs() < 1e-8);
        assert!((back.momentum[i] + xi[i]).abs() < 1e-8);
    }
}

#[test]
fn divergent_trajectories_are_rejected_and_counted() {
    let target = GaussianTarget::isotropic(2, 1.0);
    let p = Identity { dim: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ChainState::new(&target, vec![0.0, 0.0]).unwrap();
    for _ in 0..20 {
        let o = hmc_step(&mut rng, &target, &p, &mut s, 3.0, 30);
        assert!(!o.accepted && o.divergent);
    }
    assert_eq!(s.stats.divergences, 20);
    assert_eq!(s.theta, vec![0.0, 0.0]);
}

#[test]
fn cached_energy_matches_recomputation() {
    let q = Quartic;
    let cfg = ChainConfig {
        sampler: SamplerKind::Hmc,
        dt: 0.2,
        leapfrog: 4,
        steps: 500,
        seed: 8,
        ..ChainConfig::default()
    };
    let p = Identity { dim: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = ChainState::new(&q, vec![0.0; 3]).unwrap();
    for _ in 0..cfg.steps {
        hmc_step(&mut rng, &q, &p, &mut s, cfg.dt, cfg.leapfrog);
        assert!((s.energy - q.energy(&s.theta)).abs() < 1e-9);
    }
    let run = run_single_chain(&q, &p, &cfg, &[0.0; 3], 0, false).unwrap();
    assert_eq!(run.count, cfg.steps);
    assert_eq!(run.stats.proposed, cfg.steps + cfg.burn_in());
}

#[test]
fn half_normal_expected_error() {
    let sigma = 1.7;
    let target = GaussianTarget::isotropic(4, sigma * sigma);
    let cfg = ChainConfig {
        sampler: SamplerKind::Hmc,
        dt: 0.6,
        leapfrog: 3,
        steps: 100_000,
        seed: 9,
        ..ChainConfig::default()
    };
    let run = run_single_chain(&target, &Identity { dim: 4 }, &cfg, &[0.0; 4], 0, true).unwrap();
    let groups: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
    let e = run.two_pass_errors(&groups).unwrap();
    let oracle = sigma * (2.0 / std::f64::consts::PI).sqrt();
    for v in &e {
        assert!((v - oracle).abs() / oracle < 0.05, "{v} vs {oracle}");
    }
    let j = run.jensen_errors(&groups);
    for (a, b) in e.iter().zip(&j) {
        assert!(b + 1e-12 >= *a);
    }
}

#[test]
fn jensen_bound_dominates_two_pass_on_every_pixel() {
    let g = PixelGrid::square(8).unwrap();
    let (y, init) = small_problem(g, 3);
    let params = ModelParams::default();
    for seed in 0..3 {
        let cfg = ChainConfig {
            sampler: SamplerKind::Mala,
            dt: 2e-3,
            steps: 200,
            seed,
            chains: 2,
            ..ChainConfig::default()
        };
        let s = run_chain(&y, &params, &cfg, &init).unwrap();
        assert_eq!(s.estimator, ErrorEstimator::TwoPass);
        for (a, b) in s
            .displacement_error
            .values
            .iter()
            .zip(&s.displacement_jensen.values)
        {
            assert!(*a >= 0.0 && b + 1e-12 >= *a);
        }
        for (ma, mb) in s.image_error.iter().zip(&s.image_jensen) {
            for (a, b) in ma.values.iter().zip(&mb.values) {
                assert!(*a >= 0.0 && b + 1e-12 >= *a);
            }
        }
    }
}

#[test]
fn rescaled_samples_reproduce_scaled_estimator() {
    let zeta = 1e-3;
    let target = GaussianTarget::from_covariance(cov2(), vec![0.0; 2]).unwrap();
    let cfg = ChainConfig {
        sampler: SamplerKind::Mala,
        dt: 0.8 * zeta,
        steps: 5000,
        zeta,
        seed: 10,
        ..ChainConfig::default()
    };
    let run = run_single_chain(
        &target,
        &DenseCov::new(cov2()).unwrap(),
        &cfg,
        &[0.0; 2],
        0,
        true,
    )
    .unwrap();
    let groups = vec![vec![0, 1], vec![0], vec![1]];
    let e = run.two_pass_errors(&groups).unwrap();
    let hat = run.mean();
    let samples = run.samples.as_ref().unwrap();
    for (gi, grp) in groups.iter().enumerate() {
        let plain: f64 = samples
            .iter()
            .map(|t| {
                let r = crate::energy::rescale_slice(t, &hat, zeta);
                grp.iter()
                    .map(|&i| (r[i] - hat[i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / samples.len() as f64;
        assert!((plain - e[gi]).abs() < 1e-10 * e[gi]);
    }
}

#[test]
fn estimates_agree_across_temperatures() {
    let cov = cov2();
    let target = GaussianTarget::from_covariance(cov.clone(), vec![1.0, -1.0]).unwrap();
    let p = DenseCov::new(cov.clone()).unwrap();
    let groups = vec![vec![0], vec![1], vec![0, 1]];
    let mut maps = Vec::new();
    for (i, zeta) in [1.0, 1e-2, 1e-6].into_iter().enumerate() {
        let cfg = ChainConfig {
            sampler: SamplerKind::Mala,
            dt: 0.8 * zeta,
            steps: 100_000,
            zeta,
            seed: 20 + i as u64,
            ..ChainConfig::default()
        };
        let run = run_single_chain(&target, &p, &cfg, &[1.0, -1.0], 0, true).unwrap();
        let hat = run.mean();
        let shift: Vec<f64> = (0..2)
            .map(|j| (hat[j] - target.mean()[j]) / zeta.sqrt())
            .collect();
        maps.push((shift, run.two_pass_errors(&groups).unwrap()));
    }
    for (shift, e) in &maps {
        for j in 0..2 {
            assert!(shift[j].abs() < 0.05 * cov[(j, j)].sqrt() * 4.0);
        }
        for (a, b) in e.iter().zip(&maps[0].1) {
            assert!((a - b).abs() / b < 0.05, "{a} vs {b}");
        }
    }
}

#[test]
fn tuning_bracket_logic() {
    // acceptance exp(-dt) reaches [0.85, 0.95] for dt in [0.051, 0.163]
    let r = tune_with(|dt| Ok((-dt).exp()), 10.0, &TuneConfig::default()).unwrap();
    assert!(r.in_band && r.dt > 0.05 && r.dt < 0.17);
    let r = tune_with(|dt| Ok((-dt).exp()), 1e-6, &TuneConfig::default()).unwrap();
    assert!(r.in_band);
    let stuck = tune_with(|_| Ok(0.5), 1.0, &TuneConfig::default()).unwrap();
    assert!(!stuck.in_band && stuck.pilots == 20);
    assert!(tune_with(|_| Ok(0.5), 0.0, &TuneConfig::default()).is_err());
}

#[test]
fn acceptance_nonincreasing_in_step() {
    let target = GaussianTarget::from_covariance(cov2(), vec![0.0; 2]).unwrap();
    let p = DenseCov::new(cov2()).unwrap();
    for sampler in [SamplerKind::PrecondRw, SamplerKind::Mala] {
        let mut prev = 1.0;
        for dt in [0.05, 0.2, 0.8, 2.0, 5.0] {
            let cfg = ChainConfig {
                sampler,
                dt,
                steps: 20_000,
                seed: 12,
                ..ChainConfig::default()
            };
            let a = run_single_chain(&target, &p, &cfg, &[0.0; 2], 0, false)
                .unwrap()
                .stats
                .acceptance_rate();
            assert!(a <= prev + 0.01, "{sampler:?} dt {dt}: {a} after {prev}");
            prev = a;
        }
    }
}

#[test]
fn tuned_step_holds_on_fresh_seed_and_scales_with_temperature() {
    let target = GaussianTarget::from_covariance(cov2(), vec![0.0; 2]).unwrap();
    let p = DenseCov::new(cov2()).unwrap();
    let tune = TuneConfig {
        pilot_steps: 4000,
        ..TuneConfig::default()
    };
    let base = ChainConfig {
        sampler: SamplerKind::Mala,
        dt: 4.0,
        seed: 13,
        ..ChainConfig::default()
    };
    let r = tune_step_size_target(&target, &p, &base, &[0.0; 2], &tune).unwrap();
    assert!(r.in_band);
    let fresh = ChainConfig {
        dt: r.dt,
        steps: 20_000,
        seed: 99,
        ..base.clone()
    };
    let a = run_single_chain(&target, &p, &fresh, &[0.0; 2], 0, false)
        .unwrap()
        .stats
        .acceptance_rate();
    assert!((0.85..=0.95).contains(&a), "fresh acceptance {a}");

    for (sampler, power) in [(SamplerKind::Mala, 1.0), (SamplerKind::Hmc, 0.5)] {
        let cfg = ChainConfig {
            sampler,
            leapfrog: 5,
            ..base.clone()
        };
        let r1 = tune_step_size_target(&target, &p, &cfg, &[0.0; 2], &tune).unwrap();
        for zeta in [1e-2, 1e-6] {
            let rz = tune_step_size_target(
                &target,
                &p,
                &ChainConfig {
                    zeta,
                    ..cfg.clone()
                },
                &[0.0; 2],
                &tune,
            )
            .unwrap();
            let scaled = rz.dt / zeta.powf(power);
            assert!(
                (scaled - r1.dt).abs() < 1e-6 * r1.dt,
                "{sampler:?} zeta {zeta}: {scaled} vs {}",
                r1.dt
            );
        }
    }
}

fn small_problem(g: PixelGrid, seed: u64) -> (ObservationSet, StateVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = g.len();
    let img: Vec<f64> = (0..m)
        .map(|s| {
            let (r, c) = g.position(s);
            (r as f64 * 0.7).sin() + (c as f64 * 0.5).cos()
        })
        .collect();
    let y0 = ImageStack::new(g, 1, img.clone()).unwrap();
    let y1 = ImageStack::new(
        g,
        1,
        img.iter()
            .map(|v| v + 0.01 * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let mask = ObservationMask::full(g);
    let y = ObservationSet::new(y0, y1, mask).unwrap();
    let mut init = vec![0.0; 3 * m];
    init[2 * m..].copy_from_slice(&img);
    (y, StateVector::from_vec(g, 1, init).unwrap())
}

#[test]
fn posterior_chain_is_deterministic_and_shaped() {
    let g = PixelGrid::square(8).unwrap();
    let (y, init) = small_problem(g, 1);
    let params = ModelParams::default();
    let post = Posterior::new(y.clone(), params).unwrap();
    let cfg = ChainConfig {
        sampler: SamplerKind::Hmc,
        dt: 0.02,
        leapfrog: 3,
        steps: 60,
        seed: 4,
        chains: 3,
        ..ChainConfig::default()
    };
    let a = run_posterior_chain(&post, &cfg, &init).unwrap();
    let b = run_chain(&y, &params, &cfg, &init).unwrap();
    assert_eq!(a.theta_hat, b.theta_hat);
    assert_eq!(a.samples, 3 * 60);
    assert_eq!(a.displacement_error.values.len(), g.len());
    assert_eq!(a.image_error.len(), 1);
    assert!(a.displacement_error.values.iter().all(|v| *v >= 0.0));
    assert!(a.acceptance > 0.0);
    let other = run_chain(
        &y,
        &params,
        &ChainConfig {
            seed: 5,
            ..cfg.clone()
        },
        &init,
    )
    .unwrap();
    assert_ne!(a.theta_hat, other.theta_hat);
    let short = StateVector::zeros(PixelGrid::square(4).unwrap(), 1);
    assert!(run_posterior_chain(&post, &cfg, &short).is_err());
}
