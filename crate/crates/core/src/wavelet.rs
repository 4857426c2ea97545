//! Periodic orthonormal 2-D wavelet transform (separable Mallat scheme).

use serde::{Deserialize, Serialize};

use crate::error::{AmvError, Result};
use crate::model::PixelGrid;

/// Coiflet with 10 vanishing moments (30 taps), reconstruction lowpass.
const COIF5: [f64; 30] = [
    -0.000212081862067494,
    0.0003585777411617577,
    0.0021782943778456947,
    -0.00415931262757864,
    -0.010131584846900276,
    0.023408322118927783,
    0.028169744270532353,
    -0.09192158806008609,
    -0.052046670253554764,
    0.42157126673075435,
    0.7742936228603274,
    0.4379823066591634,
    -0.06203775157498196,
    -0.10556315130733723,
    0.041287530472117834,
    0.032674799467057355,
    -0.019758391600965465,
    -0.009159507338676163,
    0.006761520220620417,
    0.0024315754425382886,
    -0.0016616273039298788,
    -0.0006375589261258812,
    0.0003018579416682448,
    0.00014035632812373243,
    -4.12198619242655e-05,
    -2.1270221672515614e-05,
    3.7007277113394796e-06,
    2.0612203985788783e-06,
    -1.6237995172048338e-07,
    -9.604010112767894e-08,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    #[default]
    Coiflet5,
}

impl WaveletFamily {
    pub fn lowpass(&self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            WaveletFamily::Coiflet5 => COIF5.to_vec(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Coiflet5 => "coif5",
        }
    }
}

impl std::str::FromStr for WaveletFamily {
    type Err = AmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(WaveletFamily::Haar),
            "coif5" | "coiflet5" => Ok(WaveletFamily::Coiflet5),
            other => Err(AmvError::InvalidParameter(format!(
                "unknown wavelet family '{other}'"
            ))),
        }
    }
}

/// Orthonormal periodic wavelet basis of a fixed depth.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    family: WaveletFamily,
    depth: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// `max(0, log2(min(rows, cols)) - 2)`.
pub fn default_depth(grid: PixelGrid) -> usize {
    let n = grid.rows().min(grid.cols());
    (n.trailing_zeros() as usize).saturating_sub(2)
}

impl WaveletBasis {
    pub fn new(family: WaveletFamily, depth: usize) -> Self {
        let lo = family.lowpass();
        let l = lo.len();
        let hi = (0..l)
            .map(|n| {
                if n % 2 == 0 {
                    lo[l - 1 - n]
                } else {
                    -lo[l - 1 - n]
                }
            })
            .collect();
        Self {
            family,
            depth,
            lo,
            hi,
        }
    }

    pub fn for_grid(family: WaveletFamily, grid: PixelGrid) -> Self {
        Self::new(family, default_depth(grid))
    }

    pub fn family(&self) -> WaveletFamily {
        self.family
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn check(&self, grid: PixelGrid, len: usize) -> Result<()> {
        if len != grid.len() {
            return Err(AmvError::DimensionMismatch {
                expected: grid.len(),
                actual: len,
            });
        }
        if (grid.rows().min(grid.cols()) >> self.depth) == 0 {
            return Err(AmvError::InvalidParameter(format!(
                "wavelet depth {} too large for {}x{} grid",
                self.depth,
                grid.rows(),
                grid.cols()
            )));
        }
        Ok(())
    }

    fn analyze_line(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let half = n / 2;
        for k in 0..half {
            let (mut a, mut d) = (0.0, 0.0);
            for (j, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + j) % n];
                a += h * v;
                d += g * v;
            }
            out[k] = a;
            out[half + k] = d;
        }
    }

    fn synthesize_line(&self, c: &[f64], out: &mut [f64]) {
        let n = c.len();
        let half = n / 2;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..half {
            let (a, d) = (c[k], c[half + k]);
            for (j, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                out[(2 * k + j) % n] += h * a + g * d;
            }
        }
    }

    /// One analysis or synthesis level on the top-left `rows x cols` block.
    fn level(&self, data: &mut [f64], stride: usize, rows: usize, cols: usize, forward: bool) {
        let mut line = vec![0.0; rows.max(cols)];
        let mut out = vec![0.0; rows.max(cols)];
        let mut do_rows = |data: &mut [f64]| {
            if cols < 2 {
                return;
            }
            for r in 0..rows {
                let row = &mut data[r * stride..r * stride + cols];
                line[..cols].copy_from_slice(row);
                if forward {
                    self.analyze_line(&line[..cols], &mut out[..cols]);
                } else {
                    self.synthesize_line(&line[..cols], &mut out[..cols]);
                }
                row.copy_from_slice(&out[..cols]);
            }
        };
        let mut col_line = vec![0.0; rows];
        let mut col_out = vec![0.0; rows];
        let do_cols = |data: &mut [f64], col_line: &mut [f64], col_out: &mut [f64]| {
            if rows < 2 {
                return;
            }
            for c in 0..cols {
                for r in 0..rows {
                    col_line[r] = data[r * stride + c];
                }
                if forward {
                    self.analyze_line(col_line, col_out);
                } else {
                    self.synthesize_line(col_line, col_out);
                }
                for r in 0..rows {
                    data[r * stride + c] = col_out[r];
                }
            }
        };
        if forward {
            do_rows(data);
            do_cols(data, &mut col_line, &mut col_out);
        } else {
            do_cols(data, &mut col_line, &mut col_out);
            do_rows(data);
        }
    }

    /// Forward transform of one `m`-field, in place.
    pub fn forward(&self, grid: PixelGrid, data: &mut [f64]) -> Result<()> {
        self.check(grid, data.len())?;
        let (mut r, mut c) = (grid.rows(), grid.cols());
        for _ in 0..self.depth {
            self.level(data, grid.cols(), r, c, true);
            r = (r / 2).max(1);
            c = (c / 2).max(1);
        }
        Ok(())
    }

    /// Inverse transform of one `m`-field, in place.
    pub fn inverse(&self, grid: PixelGrid, data: &mut [f64]) -> Result<()> {
        self.check(grid, data.len())?;
        let sizes: Vec<(usize, usize)> = (0..self.depth)
            .map(|j| ((grid.rows() >> j).max(1), (grid.cols() >> j).max(1)))
            .collect();
        for &(r, c) in sizes.iter().rev() {
            self.level(data, grid.cols(), r, c, false);
        }
        Ok(())
    }

    /// Scale index of every coefficient: 0 for the approximation, then 1 for the
    /// coarsest details up to `depth` for the finest.
    pub fn coefficient_scales(&self, grid: PixelGrid) -> Vec<usize> {
        let (rows, cols) = (grid.rows(), grid.cols());
        (0..grid.len())
            .map(|s| {
                let (r, c) = grid.position(s);
                let inner = (0..=self.depth)
                    .rev()
                    .find(|&j| r < (rows >> j).max(1) && c < (cols >> j).max(1));
                self.depth - inner.unwrap_or(0)
            })
            .collect()
    }

    /// Forward transform applied to every consecutive `m`-block of `data`.
    pub fn forward_blocks(&self, grid: PixelGrid, data: &mut [f64]) -> Result<()> {
        for chunk in data.chunks_mut(grid.len()) {
            self.forward(grid, chunk)?;
        }
        Ok(())
    }

    pub fn inverse_blocks(&self, grid: PixelGrid, data: &mut [f64]) -> Result<()> {
        for chunk in data.chunks_mut(grid.len()) {
            self.inverse(grid, chunk)?;
        }
        Ok(())
    }
}
