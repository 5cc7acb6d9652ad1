//! Densities sampled on a uniform grid over [0, 1].
//!
//! Every integral in the library is a composite trapezoid rule on a shared
//! [`Grid`]. Raw observations enter through [`SampleSet`], are mapped to the
//! unit interval with [`rescale_to_unit`] and smoothed with [`kde`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Floor applied to density heights before any square root.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Default number of grid points.
pub const DEFAULT_GRID_POINTS: usize = 1001;

/// Tolerance on the unit-mass invariant of [`GridDensity`].
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Uniform grid on [0, 1] with both endpoints included.
#[derive(Clone)]
pub struct Grid {
    points: Arc<[f64]>,
}

impl Grid {
    pub fn uniform(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::Config(format!(
                "a grid needs at least 2 points, got {n_points}"
            )));
        }
        let last = (n_points - 1) as f64;
        let points: Vec<f64> = (0..n_points).map(|j| j as f64 / last).collect();
        Ok(Self {
            points: points.into(),
        })
    }

    /// Recognise a uniform grid from explicit node positions (e.g. a CSV column).
    pub fn from_points(points: &[f64]) -> Result<Self> {
        let grid = Self::uniform(points.len())?;
        for (j, (&given, &expected)) in points.iter().zip(grid.points()).enumerate() {
            if !given.is_finite() || (given - expected).abs() > 1e-9 {
                return Err(Error::Input(format!(
                    "grid is not uniform on [0,1]: node {j} is {given}, expected {expected}"
                )));
            }
        }
        Ok(grid)
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n_points() - 1) as f64
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.n_points(),
                right: other.n_points(),
            })
        }
    }

    /// Composite trapezoid approximation of the integral over [0, 1].
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        check_len(self.n_points(), values.len())?;
        Ok(trapezoid(values))
    }

    /// Running trapezoid integral, starting at 0.
    pub fn cumulative_integral(&self, values: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n_points(), values.len())?;
        let mut out = vec![0.0; values.len()];
        cumulative_trapezoid_into(values, &mut out);
        Ok(out)
    }

    /// L² inner product of two grid functions.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_len(self.n_points(), a.len())?;
        check_len(self.n_points(), b.len())?;
        Ok(trapezoid_product(a, b))
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.n_points() == other.n_points()
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("n_points", &self.n_points())
            .finish()
    }
}

impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GridRecord {
            n_points: self.n_points(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let record = GridRecord::deserialize(d)?;
        Grid::uniform(record.n_points).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct GridRecord {
    n_points: usize,
}

// Raw kernels on slices of equal length; callers check lengths.

pub(crate) fn trapezoid(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..n - 1].iter().sum();
    (interior + 0.5 * (values[0] + values[n - 1])) / (n - 1) as f64
}

pub(crate) fn trapezoid_product(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let interior: f64 = a[1..n - 1]
        .iter()
        .zip(&b[1..n - 1])
        .map(|(x, y)| x * y)
        .sum();
    (interior + 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1])) / (n - 1) as f64
}

pub(crate) fn cumulative_trapezoid_into(values: &[f64], out: &mut [f64]) {
    let n = values.len();
    let half_h = 0.5 / (n - 1) as f64;
    out[0] = 0.0;
    for j in 1..n {
        out[j] = out[j - 1] + half_h * (values[j - 1] + values[j]);
    }
}

/// Piecewise-linear interpolation of node values at a query in [0, 1].
#[inline]
pub(crate) fn interp_linear(values: &[f64], x: f64) -> f64 {
    let last = values.len() - 1;
    let pos = x * last as f64;
    let idx = (pos.floor() as usize).min(last - 1);
    let t = pos - idx as f64;
    values[idx] + t * (values[idx + 1] - values[idx])
}

/// Monotone cubic Hermite interpolant (Fritsch-Carlson slopes) of node values
/// on the uniform grid over [0, 1]. It is exact at the nodes, continuously
/// differentiable, and never leaves the range of the two adjacent node values.
#[derive(Debug, Clone)]
pub(crate) struct Pchip {
    values: Vec<f64>,
    // slopes per grid step, i.e. derivative times spacing
    slopes: Vec<f64>,
}

impl Pchip {
    pub(crate) fn new(values: &[f64]) -> Self {
        let n = values.len();
        let del: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = del[0];
            slopes[1] = del[0];
        } else {
            for j in 1..n - 1 {
                let (a, b) = (del[j - 1], del[j]);
                slopes[j] = if a * b <= 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
            }
            slopes[0] = end_slope(del[0], del[1]);
            slopes[n - 1] = end_slope(del[n - 2], del[n - 3]);
        }
        Self {
            values: values.to_vec(),
            slopes,
        }
    }

    #[inline]
    pub(crate) fn eval(&self, x: f64) -> f64 {
        let v = &self.values;
        let last = v.len() - 1;
        let pos = x * last as f64;
        let i = (pos.floor().max(0.0) as usize).min(last - 1);
        let t = pos - i as f64;
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * v[i]
            + (t3 - 2.0 * t2 + t) * self.slopes[i]
            + (3.0 * t2 - 2.0 * t3) * v[i + 1]
            + (t3 - t2) * self.slopes[i + 1]
    }
}

fn end_slope(near: f64, far: f64) -> f64 {
    let s = (3.0 * near - far) / 2.0;
    if s * near <= 0.0 {
        0.0
    } else if near * far < 0.0 && s.abs() > 3.0 * near.abs() {
        3.0 * near
    } else {
        s
    }
}

#[inline]
pub(crate) fn floored_sqrt(v: f64) -> f64 {
    v.max(DENSITY_FLOOR).sqrt()
}

/// A probability density sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl GridDensity {
    /// Validate heights that already integrate to one.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_len(grid.n_points(), values.len())?;
        check_heights(&values)?;
        let mass = trapezoid(&values);
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDensity(format!(
                "density integrates to {mass}, expected 1 within {MASS_TOLERANCE}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: &Grid) -> Self {
        Self {
            values: vec![1.0; grid.n_points()],
            grid: grid.clone(),
        }
    }

    /// Evaluate `pdf` on the grid and normalize.
    pub fn from_fn(grid: &Grid, pdf: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&x| pdf(x)).collect();
        normalize(grid, values)
    }

    /// Beta(a, b) density evaluated on the grid and renormalized.
    pub fn beta(grid: &Grid, a: f64, b: f64) -> Result<Self> {
        use statrs::distribution::{Beta, Continuous};
        let dist = Beta::new(a, b)
            .map_err(|e| Error::Config(format!("Beta({a}, {b}): {e}")))?;
        Self::from_fn(grid, |x| {
            let v = dist.pdf(x);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        })
    }

    pub(crate) fn from_normalized_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Floored square root of the heights.
    pub(crate) fn sqrt_values(&self) -> Vec<f64> {
        self.values.iter().map(|&v| floored_sqrt(v)).collect()
    }

    /// Cumulative distribution function at the grid nodes, ending exactly at 1.
    pub fn cdf(&self) -> Vec<f64> {
        let mut cdf = vec![0.0; self.values.len()];
        cumulative_trapezoid_into(&self.values, &mut cdf);
        let total = *cdf.last().expect("grid has at least two points");
        for c in &mut cdf {
            *c /= total;
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        cdf
    }

    /// Quantile function evaluated by monotone piecewise-linear inversion of the CDF.
    pub fn quantiles(&self, levels: &[f64]) -> Vec<f64> {
        let cdf = self.cdf();
        invert_monotone(&cdf, self.grid.points(), levels)
    }
}

/// Invert a non-decreasing table `ys` over nodes `xs` at sorted-or-unsorted targets.
pub(crate) fn invert_monotone(ys: &[f64], xs: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = ys.len();
    targets
        .iter()
        .map(|&p| {
            if p <= ys[0] {
                return xs[0];
            }
            if p >= ys[n - 1] {
                return xs[n - 1];
            }
            // first index with ys[j] >= p
            let j = ys.partition_point(|&y| y < p);
            let (y0, y1) = (ys[j - 1], ys[j]);
            let t = if y1 > y0 { (p - y0) / (y1 - y0) } else { 0.0 };
            xs[j - 1] + t * (xs[j] - xs[j - 1])
        })
        .collect()
}

fn check_heights(values: &[f64]) -> Result<()> {
    for (j, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidDensity(format!("non-finite value at node {j}")));
        }
        if v < 0.0 {
            return Err(Error::InvalidDensity(format!(
                "negative value {v} at node {j}"
            )));
        }
    }
    Ok(())
}

/// Composite trapezoid integral of a grid function or density.
pub fn integrate(grid: &Grid, values: &[f64]) -> Result<f64> {
    grid.integrate(values)
}

/// Rescale non-negative heights to unit mass.
pub fn normalize(grid: &Grid, mut values: Vec<f64>) -> Result<GridDensity> {
    check_len(grid.n_points(), values.len())?;
    check_heights(&values)?;
    let mass = trapezoid(&values);
    if mass <= 0.0 {
        return Err(Error::Degenerate(
            "cannot normalize a function with zero mass".into(),
        ));
    }
    for v in &mut values {
        *v /= mass;
    }
    Ok(GridDensity {
        grid: grid.clone(),
        values,
    })
}

/// Evaluate a density off-grid by monotone cubic interpolation between adjacent nodes.
pub fn interp_density(density: &GridDensity, query: &[f64]) -> Result<Vec<f64>> {
    let interp = Pchip::new(&density.values);
    query
        .iter()
        .map(|&x| {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Domain(format!("query {x} outside [0, 1]")));
            }
            Ok(interp.eval(x).max(0.0))
        })
        .collect()
}

/// Which of the two densities of a unit a sample set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableTag {
    Predictor,
    Outcome,
}

impl VariableTag {
    /// Column label used in the long-format CSV (`f` or `g`).
    pub fn label(self) -> &'static str {
        match self {
            VariableTag::Predictor => "f",
            VariableTag::Outcome => "g",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "f" => Some(VariableTag::Predictor),
            "g" => Some(VariableTag::Outcome),
            _ => None,
        }
    }
}

/// Raw observations for one unit and one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub unit_id: String,
    pub variable: VariableTag,
    samples: Vec<f64>,
}

impl SampleSet {
    pub fn new(unit_id: impl Into<String>, variable: VariableTag, samples: Vec<f64>) -> Result<Self> {
        let unit_id = unit_id.into();
        if samples.is_empty() {
            return Err(Error::Degenerate(format!(
                "unit {unit_id} has no {} samples",
                variable.label()
            )));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "unit {unit_id} has a non-finite sample {bad}"
            )));
        }
        Ok(Self {
            unit_id,
            variable,
            samples,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Affine map `x = shift + scale * u` taking [0, 1] back to the raw scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub shift: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.shift + self.scale * u
    }
}

/// Map raw values onto [0, 1] so that the minimum goes to 0 and the maximum to 1.
pub fn rescale_to_unit(samples: &[f64]) -> Result<(Vec<f64>, AffineParams)> {
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(min.is_finite() && max.is_finite()) || max <= min {
        return Err(Error::Degenerate(
            "rescaling needs finite values with max > min".into(),
        ));
    }
    let params = AffineParams {
        shift: min,
        scale: max - min,
    };
    let scaled = samples
        .iter()
        .map(|&x| params.to_unit(x).clamp(0.0, 1.0))
        .collect();
    Ok((scaled, params))
}

/// Silverman's rule of thumb, clamped to a usable range on [0, 1].
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (1.06 * var.sqrt() * m.powf(-0.2)).clamp(1e-3, 0.5)
}

/// Silverman's rule with the sample size of `n_units` units of this size.
pub fn pooled_silverman_bandwidth(samples: &[f64], n_units: usize) -> f64 {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (1.06 * var.sqrt() * (m * n_units.max(1) as f64).powf(-0.2)).clamp(1e-3, 0.5)
}

/// Bandwidth choice for [`kde`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Silverman's rule for each unit on its own.
    #[default]
    Silverman,
    /// Silverman's rule with the pooled sample size `n m`. A warp fitted to
    /// `n` units averages their estimates, so only the smoothing bias remains.
    PooledSilverman,
    Fixed(f64),
}

impl BandwidthRule {
    /// Kernel estimate of one unit's density when `n_units` units are pooled.
    pub fn estimate(&self, samples: &SampleSet, grid: &Grid, n_units: usize) -> Result<GridDensity> {
        let h = match *self {
            BandwidthRule::Silverman => None,
            BandwidthRule::PooledSilverman => {
                Some(pooled_silverman_bandwidth(samples.samples(), n_units))
            }
            BandwidthRule::Fixed(h) => Some(h),
        };
        kde(samples, grid, h)
    }
}

impl std::str::FromStr for BandwidthRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "silverman" => Ok(BandwidthRule::Silverman),
            "pooled" => Ok(BandwidthRule::PooledSilverman),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|h| *h > 0.0 && h.is_finite())
                .map(BandwidthRule::Fixed)
                .ok_or_else(|| {
                    format!("expected silverman, pooled or a positive number, got {other}")
                }),
        }
    }
}

/// Gaussian kernel density estimate with reflection at both boundaries.
pub fn kde(samples: &SampleSet, grid: &Grid, bandwidth: Option<f64>) -> Result<GridDensity> {
    let xs = samples.samples();
    if let Some(bad) = xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!(
            "sample {bad} of unit {} lies outside [0, 1]; rescale first",
            samples.unit_id
        )));
    }
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return Err(Error::Degenerate(format!(
            "unit {} needs at least 2 distinct sample values",
            samples.unit_id
        )));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(xs),
    };
    let cutoff = 8.0 * h;
    let inv_h = 1.0 / h;
    let mut values = vec![0.0; grid.n_points()];
    for &x in xs {
        // the sample and its mirror images across 0 and 1
        for centre in [x, -x, 2.0 - x] {
            let lo = ((centre - cutoff).max(0.0) * (grid.n_points() - 1) as f64).floor() as usize;
            let hi = ((centre + cutoff).min(1.0) * (grid.n_points() - 1) as f64).ceil() as usize;
            if centre + cutoff < 0.0 || centre - cutoff > 1.0 {
                continue;
            }
            for j in lo..=hi.min(grid.n_points() - 1) {
                let z = (grid.points()[j] - centre) * inv_h;
                values[j] += (-0.5 * z * z).exp();
            }
        }
    }
    normalize(grid, values)
}
