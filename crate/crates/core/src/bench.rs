//! Synthetic benchmarks: an fBm displacement field transporting a smooth random
//! texture, observed through masks with disk-shaped gaps.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energy::ModelParams;
use crate::error::{AmvError, Result};
use crate::fbm::{fbm_sample, Spectral2d};
use crate::laplace::disk;
use crate::model::{
    pack_state, DisplacementField, ImageStack, ObservationMask, ObservationSet, PixelGrid,
    StateVector,
};
use crate::spline::{bspline_analysis, warp};

/// `key = value` lines; `#` starts a comment. Keys must be consumed before [`KeyValues::finish`].
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| AmvError::Config {
                line: i + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(AmvError::Config {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(AmvError::Config {
                    line: i + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| AmvError::Config {
                line,
                msg: format!("{key}: {e}"),
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(AmvError::Config {
                line,
                msg: format!("unknown key '{key}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    /// Random disks removed until at most `coverage` of the pixels remain observed.
    Disks {
        coverage: f64,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub hurst_truth: f64,
    pub hurst_prior: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub mask: MaskKind,
    pub noise: f64,
    /// Standard deviation of the texture.
    pub texture_amplitude: f64,
    /// Gaussian low-pass cutoff as a fraction of the Nyquist frequency.
    pub texture_cutoff: f64,
    pub displacement_scale: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            channels: 1,
            hurst_truth: 1.0,
            hurst_prior: 1.0,
            alpha: 0.5,
            gamma: 0.005,
            mask: MaskKind::Full,
            noise: 0.0,
            texture_amplitude: 10.0,
            texture_cutoff: 0.5,
            displacement_scale: 1.0,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_key_values(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// Consume the benchmark keys of `kv`, leaving the rest.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let grid: Option<usize> = kv.take("grid")?;
        let rows = kv.take_or("rows", grid.unwrap_or(d.rows))?;
        let cols = kv.take_or("cols", grid.unwrap_or(d.cols))?;
        let mask_name: String = kv.take_or("mask", "full".to_string())?;
        let coverage: f64 = kv.take_or("coverage", 1.0)?;
        let radius: f64 = kv.take_or("disk_radius", rows.min(cols) as f64 / 8.0)?;
        let mask = match mask_name.as_str() {
            "full" => MaskKind::Full,
            "disks" => MaskKind::Disks { coverage, radius },
            other => {
                return Err(AmvError::Config {
                    line: 0,
                    msg: format!("unknown mask kind '{other}'"),
                })
            }
        };
        let cfg = Self {
            rows,
            cols,
            channels: kv.take_or("channels", d.channels)?,
            hurst_truth: kv.take_or("hurst_truth", d.hurst_truth)?,
            hurst_prior: kv.take_or("hurst_prior", d.hurst_prior)?,
            alpha: kv.take_or("alpha", d.alpha)?,
            gamma: kv.take_or("gamma", d.gamma)?,
            mask,
            noise: kv.take_or("noise", d.noise)?,
            texture_amplitude: kv.take_or("texture_amplitude", d.texture_amplitude)?,
            texture_cutoff: kv.take_or("texture_cutoff", d.texture_cutoff)?,
            displacement_scale: kv.take_or("displacement_scale", d.displacement_scale)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        PixelGrid::new(self.rows, self.cols)?;
        let bad = |msg: String| Err(AmvError::InvalidParameter(msg));
        if self.channels == 0 {
            return bad("at least one channel is required".into());
        }
        if let MaskKind::Disks { coverage, radius } = self.mask {
            if !(coverage > 0.0 && coverage <= 1.0) {
                return bad(format!("coverage must lie in (0, 1], got {coverage}"));
            }
            if !(radius > 0.0) {
                return bad(format!("disk radius must be positive, got {radius}"));
            }
        }
        if !(self.noise >= 0.0) || !(self.texture_amplitude > 0.0) || !(self.texture_cutoff > 0.0) {
            return bad("noise must be non-negative, texture amplitude and cutoff positive".into());
        }
        if !(self.hurst_truth > 0.0) || !(self.displacement_scale >= 0.0) {
            return bad("invalid ground-truth displacement parameters".into());
        }
        self.model_params().validate()
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid::new(self.rows, self.cols).expect("validated grid")
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            alpha: self.alpha,
            gamma: self.gamma,
            hurst_prior: self.hurst_prior,
            ..ModelParams::default()
        }
    }
}

/// Band-limited random field with a power-law spectrum, zero mean and standard deviation `amplitude`.
pub fn random_texture<R: Rng + ?Sized>(
    rng: &mut R,
    grid: PixelGrid,
    hurst: f64,
    amplitude: f64,
    cutoff: f64,
) -> Vec<f64> {
    let sp = Spectral2d::new(grid);
    let wc = cutoff * std::f64::consts::PI;
    let mult: Vec<f64> = sp
        .omega_squared()
        .iter()
        .enumerate()
        .map(|(i, &w2)| {
            if i == 0 {
                0.0
            } else {
                w2.powf(-(hurst + 1.0) / 2.0) * (-w2 / (2.0 * wc * wc)).exp()
            }
        })
        .collect();
    let noise: Vec<f64> = (0..grid.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut field = sp.apply_multiplier(&noise, &mult);
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
    let f = if sd > 0.0 { amplitude / sd } else { 0.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) * f);
    field
}

/// Observed pixels left after removing random periodic disks until the observed
/// fraction is at most `coverage`. At least one pixel stays observed.
pub fn random_disk_mask<R: Rng + ?Sized>(
    rng: &mut R,
    grid: PixelGrid,
    coverage: f64,
    radius: f64,
) -> Vec<bool> {
    let m = grid.len();
    let mut observed = vec![true; m];
    let mut count = m;
    while (count as f64) > coverage * m as f64 {
        let centre = rng.random_range(0..m);
        let gap = disk(grid, centre, radius);
        let removed = gap.iter().filter(|&&s| observed[s]).count();
        if removed == count {
            break;
        }
        for s in gap {
            observed[s] = false;
        }
        count -= removed;
    }
    observed
}

/// Draw `(theta*, y)`: displacement components from independent fBm draws, a
/// random texture at `t1`, its warp at `t0`, then masking and additive noise.
/// Unobserved entries of `y` are zero.
pub fn generate_synthetic<R: Rng + ?Sized>(
    cfg: &BenchmarkConfig,
    rng: &mut R,
) -> Result<(StateVector, ObservationSet)> {
    cfg.validate()?;
    let grid = cfg.grid();
    let m = grid.len();
    let k = cfg.channels;
    let scale = cfg.displacement_scale;
    let d1: Vec<f64> = fbm_sample(rng, cfg.hurst_truth, grid)?
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let d2: Vec<f64> = fbm_sample(rng, cfg.hurst_truth, grid)?
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let d = DisplacementField::from_components(grid, &d1, &d2)?;
    let mut tex = Vec::with_capacity(k * m);
    for _ in 0..k {
        tex.extend(random_texture(
            rng,
            grid,
            1.0,
            cfg.texture_amplitude,
            cfg.texture_cutoff,
        ));
    }
    let x1 = ImageStack::new(grid, k, tex)?;
    let x0 = warp(&bspline_analysis(&x1), &d)?;

    let mask = match cfg.mask {
        MaskKind::Full => ObservationMask::full(grid),
        MaskKind::Disks { coverage, radius } => {
            let t0 = random_disk_mask(rng, grid, coverage, radius);
            let t1 = random_disk_mask(rng, grid, coverage, radius);
            ObservationMask::new(grid, t0, t1)?
        }
    };
    let mut observe = |x: &ImageStack, seen: &[bool]| -> Result<ImageStack> {
        let mut v = x.values().to_vec();
        for c in 0..k {
            for s in 0..m {
                let i = c * m + s;
                if seen[s] {
                    if cfg.noise > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        v[i] += cfg.noise * z;
                    }
                } else {
                    v[i] = 0.0;
                }
            }
        }
        ImageStack::new(grid, k, v)
    };
    let y0 = observe(&x0, &mask.t0().to_vec())?;
    let y1 = observe(&x1, &mask.t1().to_vec())?;
    let obs = ObservationSet::new(y0, y1, mask)?;
    Ok((pack_state(&d, &x1)?, obs))
}

/// [`generate_synthetic`] driven by `cfg.seed`.
pub fn generate_seeded(cfg: &BenchmarkConfig) -> Result<(StateVector, ObservationSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_synthetic(cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::likelihood_energy;

    #[test]
    fn parse_key_values() {
        let cfg = BenchmarkConfig::parse(
            "# bench\ngrid = 16\nmask = disks # gaps\ncoverage=0.7\nnoise = 0.1\nseed = 9\n",
        )
        .unwrap();
        assert_eq!((cfg.rows, cfg.cols, cfg.seed), (16, 16, 9));
        assert_eq!(
            cfg.mask,
            MaskKind::Disks {
                coverage: 0.7,
                radius: 2.0
            }
        );
        assert_eq!(cfg.noise, 0.1);
        assert!(matches!(
            BenchmarkConfig::parse("grid = 16\nbogus = 1"),
            Err(AmvError::Config { line: 2, .. })
        ));
        assert!(matches!(
            BenchmarkConfig::parse("grid 16"),
            Err(AmvError::Config { line: 1, .. })
        ));
        assert!(matches!(
            BenchmarkConfig::parse("grid = x"),
            Err(AmvError::Config { line: 1, .. })
        ));
        assert!(BenchmarkConfig::parse("grid = 12").is_err());
        assert!(BenchmarkConfig::parse("mask = disks\ncoverage = 0").is_err());
        assert!(BenchmarkConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn noise_free_observations_equal_truth() {
        let cfg = BenchmarkConfig {
            rows: 16,
            cols: 16,
            mask: MaskKind::Disks {
                coverage: 0.6,
                radius: 2.5,
            },
            seed: 3,
            ..BenchmarkConfig::default()
        };
        let (theta, y) = generate_seeded(&cfg).unwrap();
        let m = 256;
        let t1 = y.mask.t1();
        for s in 0..m {
            if t1[s] {
                assert_eq!(y.y_t1.values()[s], theta.image()[s]);
            } else {
                assert_eq!(y.y_t1.values()[s], 0.0);
            }
        }
        assert!(likelihood_energy(&theta, &y).unwrap() < 1e-20);
        assert!(y.mask.count_t0() as f64 <= 0.6 * m as f64 && y.mask.count_t0() > 0);
        assert!(y.mask.count_t0() < m && y.mask.count_t1() < m);
    }

    #[test]
    fn full_mask_observes_everything() {
        let cfg = BenchmarkConfig {
            rows: 8,
            cols: 8,
            ..BenchmarkConfig::default()
        };
        let (_, y) = generate_seeded(&cfg).unwrap();
        assert!(y.mask.joint().iter().all(|&b| b));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = BenchmarkConfig {
            noise: 0.2,
            mask: MaskKind::Disks {
                coverage: 0.8,
                radius: 3.0,
            },
            ..BenchmarkConfig::default()
        };
        let (a, ya) = generate_seeded(&cfg).unwrap();
        let (b, yb) = generate_seeded(&cfg).unwrap();
        let max = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-12);
        assert_eq!(ya.y_t0.values(), yb.y_t0.values());
        assert_eq!(ya.mask.t1(), yb.mask.t1());
        let (c, _) = generate_seeded(&BenchmarkConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn texture_has_requested_moments() {
        let g = PixelGrid::square(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_texture(&mut rng, g, 1.0, 10.0, 0.5);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let sd = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        assert!(mean.abs() < 1e-10 && (sd - 10.0).abs() < 1e-9);
    }
}
