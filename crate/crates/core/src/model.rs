//! Pixel grid, joint state layout and the observation residual.
//!
//! Pixels are addressed row-major with 0-based flat indices `s = row * cols + col`.
//! The first spatial coordinate is the column (horizontal), the second the row
//! (vertical); displacement component `d1` moves along columns and `d2` along rows.
//!
//! A [`StateVector`] stores `(d1, d2, x^0, .., x^{k-1})` as consecutive blocks of
//! `m` values each, so its length is `(2 + k) m`.

use crate::error::{AmvError, Result};

/// Rectangular periodic pixel grid with power-of-two sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelGrid {
    rows: usize,
    cols: usize,
}

impl PixelGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || !rows.is_power_of_two() || !cols.is_power_of_two() {
            return Err(AmvError::InvalidGrid { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    /// Square grid of side `n`.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Pixel count `m`.
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Inverse of [`PixelGrid::index`]: `(row, col)` of flat index `s`.
    #[inline]
    pub fn position(&self, s: usize) -> (usize, usize) {
        (s / self.cols, s % self.cols)
    }

    /// Flat index of `(row, col)` after periodic wrapping.
    #[inline]
    pub fn wrapped_index(&self, row: isize, col: isize) -> usize {
        let r = row.rem_euclid(self.rows as isize) as usize;
        let c = col.rem_euclid(self.cols as isize) as usize;
        self.index(r, c)
    }

    fn check_same(&self, other: &PixelGrid, what: &str) -> Result<()> {
        if self != other {
            return Err(AmvError::GridMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AmvError::NonFinite(what))
    }
}

/// Stack of `k` scalar images on a grid, stored channel after channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    grid: PixelGrid,
    channels: usize,
    values: Vec<f64>,
}

impl ImageStack {
    pub fn new(grid: PixelGrid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(AmvError::InvalidParameter(
                "image stack needs at least one channel".into(),
            ));
        }
        if values.len() != channels * grid.len() {
            return Err(AmvError::DimensionMismatch {
                expected: channels * grid.len(),
                actual: values.len(),
            });
        }
        check_finite(&values, "image stack")?;
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    pub fn zeros(grid: PixelGrid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            values: vec![0.0; channels * grid.len()],
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let m = self.grid.len();
        &self.values[c * m..(c + 1) * m]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Two-component displacement field in pixels, `d1` block then `d2` block.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: PixelGrid,
    values: Vec<f64>,
}

impl DisplacementField {
    pub fn new(grid: PixelGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != 2 * grid.len() {
            return Err(AmvError::DimensionMismatch {
                expected: 2 * grid.len(),
                actual: values.len(),
            });
        }
        check_finite(&values, "displacement field")?;
        Ok(Self { grid, values })
    }

    pub fn from_components(grid: PixelGrid, d1: &[f64], d2: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(2 * grid.len());
        values.extend_from_slice(d1);
        values.extend_from_slice(d2);
        Self::new(grid, values)
    }

    pub fn zeros(grid: PixelGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; 2 * grid.len()],
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Horizontal component (along columns).
    pub fn d1(&self) -> &[f64] {
        &self.values[..self.grid.len()]
    }

    /// Vertical component (along rows).
    pub fn d2(&self) -> &[f64] {
        &self.values[self.grid.len()..]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Joint unknown `theta = (d, x_t1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    grid: PixelGrid,
    channels: usize,
    data: Vec<f64>,
}

impl StateVector {
    pub fn zeros(grid: PixelGrid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; (2 + channels) * grid.len()],
        }
    }

    pub fn from_vec(grid: PixelGrid, channels: usize, data: Vec<f64>) -> Result<Self> {
        let n = (2 + channels) * grid.len();
        if data.len() != n {
            return Err(AmvError::DimensionMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Total dimension `n = (2 + k) m`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn displacement(&self) -> &[f64] {
        &self.data[..2 * self.grid.len()]
    }

    pub fn image(&self) -> &[f64] {
        &self.data[2 * self.grid.len()..]
    }

    pub fn d1(&self) -> &[f64] {
        &self.data[..self.grid.len()]
    }

    pub fn d2(&self) -> &[f64] {
        let m = self.grid.len();
        &self.data[m..2 * m]
    }

    /// Flat index of displacement component `comp` (0 or 1) at pixel `s`.
    #[inline]
    pub fn displacement_index(grid: PixelGrid, comp: usize, s: usize) -> usize {
        comp * grid.len() + s
    }

    /// Flat index of image channel `c` at pixel `s`.
    #[inline]
    pub fn image_index(grid: PixelGrid, c: usize, s: usize) -> usize {
        (2 + c) * grid.len() + s
    }

    pub fn unpack(&self) -> Result<(DisplacementField, ImageStack)> {
        let d = DisplacementField::new(self.grid, self.displacement().to_vec())?;
        let x = ImageStack::new(self.grid, self.channels, self.image().to_vec())?;
        Ok((d, x))
    }
}

/// Concatenate a displacement field and an image stack into a state vector.
pub fn pack_state(d: &DisplacementField, x: &ImageStack) -> Result<StateVector> {
    d.grid.check_same(&x.grid, "pack_state")?;
    let mut data = Vec::with_capacity(d.values.len() + x.values.len());
    data.extend_from_slice(&d.values);
    data.extend_from_slice(&x.values);
    Ok(StateVector {
        grid: d.grid,
        channels: x.channels,
        data,
    })
}

/// Observed-pixel sets at the two acquisition times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    grid: PixelGrid,
    t0: Vec<bool>,
    t1: Vec<bool>,
}

impl ObservationMask {
    /// Mask with at least one observed pixel per time.
    pub fn new(grid: PixelGrid, t0: Vec<bool>, t1: Vec<bool>) -> Result<Self> {
        let mask = Self::new_allow_empty(grid, t0, t1)?;
        if !mask.t0.iter().any(|&b| b) {
            return Err(AmvError::EmptyMask("t0"));
        }
        if !mask.t1.iter().any(|&b| b) {
            return Err(AmvError::EmptyMask("t1"));
        }
        Ok(mask)
    }

    /// Like [`ObservationMask::new`] but accepts times with no observation.
    /// Prior-only instances are built this way.
    pub fn new_allow_empty(grid: PixelGrid, t0: Vec<bool>, t1: Vec<bool>) -> Result<Self> {
        for v in [&t0, &t1] {
            if v.len() != grid.len() {
                return Err(AmvError::DimensionMismatch {
                    expected: grid.len(),
                    actual: v.len(),
                });
            }
        }
        Ok(Self { grid, t0, t1 })
    }

    pub fn full(grid: PixelGrid) -> Self {
        Self {
            grid,
            t0: vec![true; grid.len()],
            t1: vec![true; grid.len()],
        }
    }

    pub fn unobserved(grid: PixelGrid) -> Self {
        Self {
            grid,
            t0: vec![false; grid.len()],
            t1: vec![false; grid.len()],
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn t0(&self) -> &[bool] {
        &self.t0
    }

    pub fn t1(&self) -> &[bool] {
        &self.t1
    }

    /// Pixels observed at both times.
    pub fn joint(&self) -> Vec<bool> {
        self.t0
            .iter()
            .zip(&self.t1)
            .map(|(&a, &b)| a && b)
            .collect()
    }

    pub fn count_t0(&self) -> usize {
        self.t0.iter().filter(|&&b| b).count()
    }

    pub fn count_t1(&self) -> usize {
        self.t1.iter().filter(|&&b| b).count()
    }
}

/// Partial observations `y` of the image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub y_t0: ImageStack,
    pub y_t1: ImageStack,
    pub mask: ObservationMask,
}

impl ObservationSet {
    pub fn new(y_t0: ImageStack, y_t1: ImageStack, mask: ObservationMask) -> Result<Self> {
        y_t0.grid.check_same(&y_t1.grid, "observation times")?;
        y_t0.grid.check_same(&mask.grid, "observation mask")?;
        if y_t0.channels != y_t1.channels {
            return Err(AmvError::DimensionMismatch {
                expected: y_t0.channels,
                actual: y_t1.channels,
            });
        }
        Ok(Self { y_t0, y_t1, mask })
    }

    pub fn grid(&self) -> PixelGrid {
        self.mask.grid
    }

    pub fn channels(&self) -> usize {
        self.y_t0.channels
    }
}

/// Misfit between the modelled images and the observations at both times.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub t0: Vec<f64>,
    pub t1: Vec<f64>,
}

impl ResidualVector {
    pub fn squared_norm(&self) -> f64 {
        self.t0.iter().chain(&self.t1).map(|v| v * v).sum()
    }
}

/// Residual at observed pixels, zero elsewhere; `warped_x_t0` is `W(x_t1, d)`.
pub fn residual(
    theta: &StateVector,
    y: &ObservationSet,
    warped_x_t0: &ImageStack,
) -> Result<ResidualVector> {
    theta.grid.check_same(&y.grid(), "residual")?;
    warped_x_t0
        .grid
        .check_same(&y.grid(), "residual (warped image)")?;
    if theta.channels != y.channels() || warped_x_t0.channels != y.channels() {
        return Err(AmvError::DimensionMismatch {
            expected: y.channels(),
            actual: theta.channels,
        });
    }
    Ok(residual_slices(
        theta.grid.len(),
        y.channels(),
        theta.image(),
        warped_x_t0.values(),
        y,
    ))
}

pub(crate) fn residual_slices(
    m: usize,
    channels: usize,
    x_t1: &[f64],
    x_t0: &[f64],
    y: &ObservationSet,
) -> ResidualVector {
    let mut t0 = vec![0.0; channels * m];
    let mut t1 = vec![0.0; channels * m];
    let (m0, m1) = (y.mask.t0(), y.mask.t1());
    let (y0, y1) = (y.y_t0.values(), y.y_t1.values());
    for c in 0..channels {
        for s in 0..m {
            let i = c * m + s;
            if m0[s] {
                t0[i] = x_t0[i] - y0[i];
            }
            if m1[s] {
                t1[i] = x_t1[i] - y1[i];
            }
        }
    }
    ResidualVector { t0, t1 }
}
