//! Endpoint-error criteria and expected-error based weightings.
//!
//! For observables `psi` over a domain with expected errors `E(psi) > 0` the
//! weight families minimise `sum w(psi) E(psi)` under their normalisation:
//!
//! * `p = 1`: `sum -log w = 0`, giving `w = E^{-1} * geomean(E)`;
//! * `p = 2`: `sum sqrt(w) = #P`, giving `w = (#P E^{-1} / sum E^{-1})^2`;
//! * sparse: `tau` nonzero weights equal to `#P / tau` on the smallest errors.

use serde::{Deserialize, Serialize};

use crate::error::{AmvError, Result};
use crate::model::{DisplacementField, ObservationMask, PixelGrid, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservableKind {
    /// `(d1(s), d2(s))`, two components.
    Displacement,
    /// Intensity of one channel of `x_t1`.
    Image { channel: usize },
}

/// Per-pixel coordinate-selector observables over a pixel domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSet {
    grid: PixelGrid,
    channels: usize,
    kind: ObservableKind,
    pixels: Vec<usize>,
}

impl ObservableSet {
    pub fn new(
        grid: PixelGrid,
        channels: usize,
        kind: ObservableKind,
        pixels: Vec<usize>,
    ) -> Result<Self> {
        if let ObservableKind::Image { channel } = kind {
            if channel >= channels {
                return Err(AmvError::InvalidParameter(format!(
                    "channel {channel} out of {channels}"
                )));
            }
        }
        if let Some(&bad) = pixels.iter().find(|&&s| s >= grid.len()) {
            return Err(AmvError::InvalidParameter(format!(
                "pixel {bad} outside the grid"
            )));
        }
        Ok(Self {
            grid,
            channels,
            kind,
            pixels,
        })
    }

    /// Displacement observables on every pixel.
    pub fn displacement(grid: PixelGrid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            kind: ObservableKind::Displacement,
            pixels: (0..grid.len()).collect(),
        }
    }

    pub fn image(grid: PixelGrid, channels: usize, channel: usize) -> Result<Self> {
        Self::new(
            grid,
            channels,
            ObservableKind::Image { channel },
            (0..grid.len()).collect(),
        )
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> ObservableKind {
        self.kind
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    /// `#P(Omega)`.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Output dimension `l` of each observable.
    pub fn ell(&self) -> usize {
        match self.kind {
            ObservableKind::Displacement => 2,
            ObservableKind::Image { .. } => 1,
        }
    }

    /// State-vector coordinates read by the observable at pixel `s`.
    pub fn coords(&self, s: usize) -> Vec<usize> {
        let g = self.grid;
        match self.kind {
            ObservableKind::Displacement => vec![
                StateVector::displacement_index(g, 0, s),
                StateVector::displacement_index(g, 1, s),
            ],
            ObservableKind::Image { channel } => vec![StateVector::image_index(g, channel, s)],
        }
    }

    /// Coordinate groups, one per observable, in domain order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        self.pixels.iter().map(|&s| self.coords(s)).collect()
    }
}

/// Per-pixel expected error; `NaN` off the evaluated domain or where undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedErrorMap {
    pub rows: usize,
    pub cols: usize,
    pub kind: ObservableKind,
    pub values: Vec<f64>,
}

impl ExpectedErrorMap {
    pub fn from_observables(obs: &ObservableSet, per_observable: &[f64]) -> Self {
        let g = obs.grid();
        let mut values = vec![f64::NAN; g.len()];
        for (&s, &v) in obs.pixels().iter().zip(per_observable) {
            values[s] = v;
        }
        Self {
            rows: g.rows(),
            cols: g.cols(),
            kind: obs.kind(),
            values,
        }
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid::new(self.rows, self.cols).expect("map built from a valid grid")
    }

    pub fn on(&self, pixels: &[usize]) -> Vec<f64> {
        pixels.iter().map(|&s| self.values[s]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightFamily {
    Uniform,
    Power(u8),
    Sparse { tau: usize },
}

/// Weights aligned with a list of observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub family: WeightFamily,
    pub weights: Vec<f64>,
    /// `c_p` for power families (geometric or harmonic-type normaliser), `c_0 = #P / tau` for sparse.
    pub constant: f64,
    /// Selection threshold: expected error of the `tau`-th smallest observable.
    pub d0: Option<f64>,
}

impl WeightMap {
    pub fn uniform(n: usize) -> Self {
        Self {
            family: WeightFamily::Uniform,
            weights: vec![1.0; n],
            constant: 1.0,
            d0: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Value of the family's equality constraint `h(w)`; zero for emitted maps.
    pub fn constraint_residual(&self) -> f64 {
        let n = self.weights.len() as f64;
        match self.family {
            WeightFamily::Uniform => self.weights.iter().map(|w| w - 1.0).map(f64::abs).sum(),
            WeightFamily::Power(1) => h1(&self.weights),
            WeightFamily::Power(_) => h2(&self.weights, n),
            WeightFamily::Sparse { tau } => h0(&self.weights, tau),
        }
    }
}

pub fn h1(w: &[f64]) -> f64 {
    w.iter().map(|v| -v.ln()).sum()
}

pub fn h2(w: &[f64], n: f64) -> f64 {
    w.iter().map(|v| v.sqrt()).sum::<f64>() - n
}

pub fn h0(w: &[f64], tau: usize) -> f64 {
    w.iter().filter(|&&v| v > 0.0).count() as f64 - tau as f64
}

fn check_errors(e: &[f64]) -> Result<()> {
    if e.is_empty() {
        return Err(AmvError::EmptyDomain);
    }
    for (index, &value) in e.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(AmvError::InvalidExpectedError { index, value });
        }
    }
    Ok(())
}

/// Optimal weights of power `p` for expected errors `e`.
pub fn weights_power(e: &[f64], p: u8) -> Result<WeightMap> {
    check_errors(e)?;
    let n = e.len() as f64;
    match p {
        1 => {
            let log_gm = e.iter().map(|v| v.ln()).sum::<f64>() / n;
            let gm = log_gm.exp();
            let weights = e.iter().map(|v| (log_gm - v.ln()).exp()).collect();
            Ok(WeightMap {
                family: WeightFamily::Power(1),
                weights,
                constant: gm,
                d0: None,
            })
        }
        2 => {
            let s: f64 = e.iter().map(|v| 1.0 / v).sum();
            let c = n / s;
            let weights = e.iter().map(|v| (c / v).powi(2)).collect();
            Ok(WeightMap {
                family: WeightFamily::Power(2),
                weights,
                constant: c,
                d0: None,
            })
        }
        _ => Err(AmvError::InvalidParameter(format!(
            "weight power must be 1 or 2, got {p}"
        ))),
    }
}

/// Binary weights on the `tau` smallest expected errors.
pub fn weights_sparse(e: &[f64], tau: usize) -> Result<WeightMap> {
    if e.is_empty() {
        return Err(AmvError::EmptyDomain);
    }
    if tau == 0 || tau > e.len() {
        return Err(AmvError::InvalidParameter(format!(
            "tau must lie in [1, {}], got {tau}",
            e.len()
        )));
    }
    if let Some((index, &value)) = e.iter().enumerate().find(|(_, v)| v.is_nan()) {
        return Err(AmvError::InvalidExpectedError { index, value });
    }
    let mut order: Vec<usize> = (0..e.len()).collect();
    order.sort_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)));
    let c0 = e.len() as f64 / tau as f64;
    let mut weights = vec![0.0; e.len()];
    for &i in &order[..tau] {
        weights[i] = c0;
    }
    Ok(WeightMap {
        family: WeightFamily::Sparse { tau },
        weights,
        constant: c0,
        d0: Some(e[order[tau - 1]]),
    })
}

/// Probability bound `P(|psi - psi_hat| >= a) <= E / a`, clipped to `[0, 1]`.
pub fn chebyshev_bound(expected: f64, a: f64) -> f64 {
    if a <= 0.0 {
        return 1.0;
    }
    (expected / a).clamp(0.0, 1.0)
}

/// Per-pixel endpoint error vectors `d_true - d_est`.
pub fn endpoint_errors(
    d_true: &DisplacementField,
    d_est: &DisplacementField,
) -> Result<Vec<[f64; 2]>> {
    if d_true.grid() != d_est.grid() {
        return Err(AmvError::GridMismatch("endpoint errors".into()));
    }
    Ok(d_true
        .d1()
        .iter()
        .zip(d_true.d2())
        .zip(d_est.d1().iter().zip(d_est.d2()))
        .map(|((a1, a2), (b1, b2))| [a1 - b1, a2 - b2])
        .collect())
}

/// `(1 / #P) sum_i w_i |err(domain_i)|` over the domain pixels.
pub fn epe(domain: &[usize], weights: &WeightMap, errors: &[[f64; 2]]) -> Result<f64> {
    if domain.is_empty() {
        return Err(AmvError::EmptyDomain);
    }
    if weights.len() != domain.len() {
        return Err(AmvError::DimensionMismatch {
            expected: domain.len(),
            actual: weights.len(),
        });
    }
    let total: f64 = domain
        .iter()
        .zip(&weights.weights)
        .map(|(&s, w)| {
            let [a, b] = errors[s];
            w * a.hypot(b)
        })
        .sum();
    Ok(total / domain.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpeReport {
    pub standard: f64,
    pub weighted_p1: f64,
    pub weighted_p2: f64,
    pub masked: f64,
    pub sparse: f64,
    pub sparse_masked: f64,
}

impl EpeReport {
    pub const HEADER: [&'static str; 6] = [
        "standard",
        "weighted_p1",
        "weighted_p2",
        "masked",
        "sparse",
        "sparse_masked",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.standard,
            self.weighted_p1,
            self.weighted_p2,
            self.masked,
            self.sparse,
            self.sparse_masked,
        ]
    }
}

/// The six endpoint-error criteria for an estimate with displacement expected errors `e_hat`.
pub fn criteria_suite(
    d_true: &DisplacementField,
    d_est: &DisplacementField,
    e_hat: &ExpectedErrorMap,
    mask: &ObservationMask,
) -> Result<EpeReport> {
    let g = d_true.grid();
    if e_hat.values.len() != g.len() || mask.grid() != g {
        return Err(AmvError::GridMismatch("criteria inputs".into()));
    }
    let errors = endpoint_errors(d_true, d_est)?;
    let all: Vec<usize> = (0..g.len()).collect();
    let joint = mask.joint();
    let observed: Vec<usize> = all.iter().copied().filter(|&s| joint[s]).collect();
    let e_all = e_hat.on(&all);
    if let Some((index, &value)) = e_all
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(AmvError::InvalidExpectedError { index, value });
    }

    let positive: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&s| e_hat.values[s] > 0.0)
        .collect();
    if positive.len() < all.len() {
        log::warn!(
            "{} pixels with zero expected error left out of the weighted criteria",
            all.len() - positive.len()
        );
    }
    let e_pos = e_hat.on(&positive);
    let weighted = |p: u8| -> Result<f64> { epe(&positive, &weights_power(&e_pos, p)?, &errors) };

    let tau_m = observed.len();
    let tau_obs = (observed.len() / 2).max(1);
    Ok(EpeReport {
        standard: epe(&all, &WeightMap::uniform(all.len()), &errors)?,
        weighted_p1: weighted(1)?,
        weighted_p2: weighted(2)?,
        masked: epe(&observed, &WeightMap::uniform(observed.len()), &errors)?,
        sparse: epe(&all, &weights_sparse(&e_all, tau_m)?, &errors)?,
        sparse_masked: epe(
            &observed,
            &weights_sparse(&e_hat.on(&observed), tau_obs)?,
            &errors,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epe_hand_cases() {
        let errors = vec![[3.0, 4.0]];
        assert_eq!(epe(&[0], &WeightMap::uniform(1), &errors).unwrap(), 5.0);
        let errors = vec![[1.0, 0.0], [0.0, 2.0], [2.0, 0.0]];
        let w = WeightMap {
            weights: vec![2.0, 1.0, 1.0],
            ..WeightMap::uniform(3)
        };
        assert!((epe(&[0, 1, 2], &w, &errors).unwrap() - 2.0).abs() < 1e-15);
        assert!(epe(&[], &WeightMap::uniform(0), &errors).is_err());
        let zero = vec![[0.0, 0.0]; 3];
        assert_eq!(epe(&[0, 1, 2], &WeightMap::uniform(3), &zero).unwrap(), 0.0);
    }

    #[test]
    fn equal_errors_give_unit_weights() {
        let e = vec![0.7; 9];
        for p in [1, 2] {
            let w = weights_power(&e, p).unwrap();
            assert!(w.weights.iter().all(|v| (v - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn two_observable_p1_closed_form() {
        let w = weights_power(&[1.0, 2.0], 1).unwrap();
        let r2 = std::f64::consts::SQRT_2;
        assert!((w.weights[0] - r2).abs() < 1e-14);
        assert!((w.weights[1] - r2 / 2.0).abs() < 1e-14);
        assert!(w.constraint_residual().abs() < 1e-12);
    }

    #[test]
    fn weights_reject_zero_and_nan() {
        assert!(weights_power(&[1.0, 0.0], 1).is_err());
        assert!(weights_power(&[1.0, f64::NAN], 2).is_err());
        assert!(weights_power(&[1.0], 3).is_err());
        assert!(weights_sparse(&[1.0, 2.0], 0).is_err());
        assert!(weights_sparse(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn sparse_cases() {
        let w = weights_sparse(&[3.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(w.weights, vec![0.0, 3.0, 0.0]);
        assert_eq!(w.d0, Some(1.0));
        let w = weights_sparse(&[3.0, 1.0, 2.0], 3).unwrap();
        assert_eq!(w.weights, vec![1.0; 3]);
        assert_eq!(w.constraint_residual(), 0.0);
    }

    #[test]
    fn weights_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<f64> = (0..15).map(|_| rng.random_range(0.1..3.0)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * 3.7).collect();
        for p in [1, 2] {
            let a = weights_power(&e, p).unwrap();
            let b = weights_power(&scaled, p).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-12 * x.abs());
            }
        }
    }

    #[test]
    fn chebyshev_limits() {
        assert_eq!(chebyshev_bound(0.4, 0.4), 1.0);
        assert_eq!(chebyshev_bound(0.4, f64::INFINITY), 0.0);
        assert_eq!(chebyshev_bound(0.4, 0.8), 0.5);
    }

    #[test]
    fn degenerate_mask_symmetries() {
        let g = PixelGrid::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth =
            DisplacementField::new(g, (0..32).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
        let est = DisplacementField::new(g, (0..32).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let e = ExpectedErrorMap {
            rows: 4,
            cols: 4,
            kind: ObservableKind::Displacement,
            values: vec![0.3; 16],
        };
        let full = ObservationMask::full(g);
        let r = criteria_suite(&truth, &est, &e, &full).unwrap();
        assert!((r.standard - r.masked).abs() < 1e-14);
        assert!((r.standard - r.sparse).abs() < 1e-14);
        assert!((r.standard - r.weighted_p1).abs() < 1e-14);
        assert!((r.standard - r.weighted_p2).abs() < 1e-14);
        let zero = criteria_suite(&truth, &truth, &e, &full).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_error_pixels_leave_weighted_domain() {
        let g = PixelGrid::square(2).unwrap();
        let truth = DisplacementField::new(g, vec![1.0; 8]).unwrap();
        let est = DisplacementField::zeros(g);
        let e = ExpectedErrorMap {
            rows: 2,
            cols: 2,
            kind: ObservableKind::Displacement,
            values: vec![0.0, 1.0, 1.0, 1.0],
        };
        let r = criteria_suite(&truth, &est, &e, &ObservationMask::full(g)).unwrap();
        assert!((r.weighted_p1 - std::f64::consts::SQRT_2).abs() < 1e-14);
        let mut bad = e.clone();
        bad.values[1] = f64::NAN;
        assert!(criteria_suite(&truth, &est, &bad, &ObservationMask::full(g)).is_err());
    }
}
