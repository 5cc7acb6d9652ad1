//! Geometry of half densities on the unit sphere of square-integrable functions.
//!
//! A density `f` is represented by `p = sqrt(f)`, which has unit L² norm. On
//! that sphere geodesics, exponential and logarithmic maps and parallel
//! transport all have closed forms. The Fisher-Rao distance between two
//! densities is the arc length between their half densities, and the
//! Hellinger distance is a monotone function of the same inner product.

use std::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::grid_density::{
    floored_sqrt, trapezoid, trapezoid_product, Grid, GridDensity, DENSITY_FLOOR,
};

/// Below this angle or tangent norm the closed forms are replaced by their limits.
pub const SMALL_ANGLE: f64 = 1e-12;

const UNIT_NORM_TOLERANCE: f64 = 1e-6;
const TANGENCY_TOLERANCE: f64 = 1e-6;

/// A point on the unit sphere in L²[0, 1].
///
/// Half densities obtained from [`srf`] are non-negative; points reached by
/// [`exp_map`] may leave the positive orthant.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl HalfDensity {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_len(grid.n_points(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("half density has non-finite values".into()));
        }
        let norm_sq = trapezoid_product(&values, &values);
        if (norm_sq - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Domain(format!(
                "half density has squared norm {norm_sq}, expected 1"
            )));
        }
        Ok(Self { grid, values })
    }

    /// Constant 1, the half density of the uniform distribution.
    pub fn uniform(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![1.0; grid.n_points()],
        }
    }

    #[cfg(test)]
    pub(crate) fn from_unit_values(grid: Grid, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        trapezoid_product(&self.values, &self.values).sqrt()
    }

    pub fn inner(&self, other: &HalfDensity) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(trapezoid_product(&self.values, &other.values))
    }

    /// L² (chord) distance `||p - q||`.
    pub fn chord_distance(&self, other: &HalfDensity) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let diff: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(trapezoid_product(&diff, &diff).sqrt())
    }

    /// Arc length on the sphere.
    pub fn arc_distance(&self, other: &HalfDensity) -> Result<f64> {
        Ok(self.inner(other)?.clamp(-1.0, 1.0).acos())
    }
}

/// An element of the tangent space at a [`HalfDensity`].
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: HalfDensity,
    values: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: HalfDensity, values: Vec<f64>) -> Result<Self> {
        check_len(base.grid.n_points(), values.len())?;
        let along = trapezoid_product(&values, &base.values);
        if along.abs() > TANGENCY_TOLERANCE {
            return Err(Error::Domain(format!(
                "vector is not tangent: <v, p> = {along}"
            )));
        }
        Ok(Self { base, values })
    }

    /// Remove the component along the base point, producing a tangent vector.
    pub fn project(base: HalfDensity, mut values: Vec<f64>) -> Result<Self> {
        check_len(base.grid.n_points(), values.len())?;
        let along = trapezoid_product(&values, &base.values)
            / trapezoid_product(&base.values, &base.values);
        for (v, p) in values.iter_mut().zip(&base.values) {
            *v -= along * p;
        }
        Ok(Self { base, values })
    }

    pub fn zero(base: HalfDensity) -> Self {
        let values = vec![0.0; base.grid.n_points()];
        Self { base, values }
    }

    pub fn base(&self) -> &HalfDensity {
        &self.base
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        trapezoid_product(&self.values, &self.values).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base: self.base.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Square-root representation `p = sqrt(f)` of a density (with the density floor).
pub fn srf(f: &GridDensity) -> HalfDensity {
    HalfDensity {
        grid: f.grid().clone(),
        values: f.sqrt_values(),
    }
}

/// Back from the sphere: `f = p²`, renormalized to unit mass.
pub fn srf_inverse(p: &HalfDensity) -> GridDensity {
    let mut values: Vec<f64> = p.values.iter().map(|v| v * v).collect();
    let mass = trapezoid(&values);
    for v in &mut values {
        *v /= mass;
    }
    GridDensity::from_normalized_unchecked(p.grid.clone(), values)
}

fn ensure_based_at(p: &HalfDensity, v: &TangentVector) -> Result<()> {
    p.grid.ensure_same(&v.base.grid)?;
    let along = trapezoid_product(&v.values, &p.values);
    if along.abs() > TANGENCY_TOLERANCE {
        return Err(Error::Domain(format!(
            "tangent vector is not based at the given point: <v, p> = {along}"
        )));
    }
    Ok(())
}

fn renormalized(grid: &Grid, mut values: Vec<f64>) -> HalfDensity {
    let norm = trapezoid_product(&values, &values).sqrt();
    for v in &mut values {
        *v /= norm;
    }
    HalfDensity {
        grid: grid.clone(),
        values,
    }
}

/// Exponential map `cos(|v|) p + sin(|v|) v / |v|`.
pub fn exp_map(p: &HalfDensity, v: &TangentVector) -> Result<HalfDensity> {
    ensure_based_at(p, v)?;
    let norm = v.norm();
    if norm >= PI {
        return Err(Error::Domain(format!(
            "tangent norm {norm} is not below pi; the exponential map is not one-to-one there"
        )));
    }
    if norm < SMALL_ANGLE {
        return Ok(p.clone());
    }
    let (s, c) = norm.sin_cos();
    let values = p
        .values
        .iter()
        .zip(&v.values)
        .map(|(pj, vj)| c * pj + s * vj / norm)
        .collect();
    Ok(renormalized(&p.grid, values))
}

/// Logarithmic map, the inverse of [`exp_map`] away from the antipode.
pub fn log_map(p: &HalfDensity, q: &HalfDensity) -> Result<TangentVector> {
    let cos_theta = p.inner(q)?;
    if cos_theta < -1.0 + 1e-9 {
        return Err(Error::Domain(
            "logarithmic map is undefined at the antipodal point".into(),
        ));
    }
    let theta = cos_theta.clamp(-1.0, 1.0).acos();
    if theta < SMALL_ANGLE {
        return Ok(TangentVector::zero(p.clone()));
    }
    let scale = theta / theta.sin();
    let raw = q
        .values
        .iter()
        .zip(&p.values)
        .map(|(qj, pj)| scale * (qj - pj * cos_theta))
        .collect();
    TangentVector::project(p.clone(), raw)
}

/// Point at `tau` along the Fisher-Rao geodesic from `f1` to `f2`.
pub fn geodesic(f1: &GridDensity, f2: &GridDensity, tau: f64) -> Result<GridDensity> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau {tau} outside [0, 1]")));
    }
    let theta = fisher_rao_distance(f1, f2)?;
    if theta <= 1e-10 {
        return Ok(f1.clone());
    }
    let a = ((1.0 - tau) * theta).sin() / theta.sin();
    let b = (tau * theta).sin() / theta.sin();
    let p1 = f1.sqrt_values();
    let p2 = f2.sqrt_values();
    let mut values: Vec<f64> = p1
        .iter()
        .zip(&p2)
        .map(|(x, y)| (a * x + b * y).powi(2))
        .collect();
    let mass = trapezoid(&values);
    for v in &mut values {
        *v /= mass;
    }
    Ok(GridDensity::from_normalized_unchecked(f1.grid().clone(), values))
}

/// Parallel transport of `v` (tangent at its base `p1`) to the tangent space at `p2`
/// along the shortest geodesic.
pub fn parallel_transport(v: &TangentVector, p2: &HalfDensity) -> Result<TangentVector> {
    let p1 = &v.base;
    p1.grid.ensure_same(&p2.grid)?;
    let sum: Vec<f64> = p1.values.iter().zip(&p2.values).map(|(a, b)| a + b).collect();
    let sum_sq = trapezoid_product(&sum, &sum);
    if sum_sq < 1e-12 {
        return Err(Error::Domain(
            "parallel transport between antipodal points is undefined".into(),
        ));
    }
    let coef = 2.0 * trapezoid_product(&v.values, &p2.values) / sum_sq;
    let values = v
        .values
        .iter()
        .zip(&sum)
        .map(|(vj, sj)| vj - coef * sj)
        .collect();
    Ok(TangentVector {
        base: p2.clone(),
        values,
    })
}

/// Bhattacharyya coefficient `∫ sqrt(f1 f2)`.
pub fn bhattacharyya(f1: &GridDensity, f2: &GridDensity) -> Result<f64> {
    f1.grid().ensure_same(f2.grid())?;
    Ok(bhattacharyya_raw(f1.values(), f2.values()))
}

pub(crate) fn bhattacharyya_raw(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let term = |j: usize| floored_sqrt(a[j]) * floored_sqrt(b[j]);
    let interior: f64 = (1..n - 1).map(term).sum();
    (interior + 0.5 * (term(0) + term(n - 1))) / (n - 1) as f64
}

/// Hellinger distance `sqrt(1 - BC)`.
pub fn hellinger(f1: &GridDensity, f2: &GridDensity) -> Result<f64> {
    let bc = bhattacharyya(f1, f2)?.clamp(0.0, 1.0);
    Ok((1.0 - bc).sqrt())
}

/// Fisher-Rao (geodesic) distance `arccos(BC)`.
pub fn fisher_rao_distance(f1: &GridDensity, f2: &GridDensity) -> Result<f64> {
    Ok(bhattacharyya(f1, f2)?.clamp(-1.0, 1.0).acos())
}

/// Plain L² distance between the densities themselves.
pub fn l2_distance(f1: &GridDensity, f2: &GridDensity) -> Result<f64> {
    f1.grid().ensure_same(f2.grid())?;
    let diff: Vec<f64> = f1
        .values()
        .iter()
        .zip(f2.values())
        .map(|(a, b)| a - b)
        .collect();
    Ok(trapezoid_product(&diff, &diff).sqrt())
}

pub const DEFAULT_QUANTILE_LEVELS: usize = 1000;

/// Quadratic Wasserstein distance through the quantile functions.
pub fn wasserstein_1d(f1: &GridDensity, f2: &GridDensity, n_quantiles: usize) -> Result<f64> {
    f1.grid().ensure_same(f2.grid())?;
    if n_quantiles == 0 {
        return Err(Error::Config("wasserstein needs at least one quantile level".into()));
    }
    let levels: Vec<f64> = (0..n_quantiles)
        .map(|k| (k as f64 + 0.5) / n_quantiles as f64)
        .collect();
    let q1 = f1.quantiles(&levels);
    let q2 = f2.quantiles(&levels);
    let mean_sq = q1
        .iter()
        .zip(&q2)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n_quantiles as f64;
    Ok(mean_sq.sqrt())
}

/// Kullback-Leibler divergence `∫ f1 log(f1 / f2)`, with both logs floored.
///
/// The logarithm is integrable but unbounded where a density vanishes, which
/// the trapezoid rule handles badly, so each cell is integrated exactly for
/// the piecewise-linear interpolants of the two densities.
pub fn kl_divergence(f1: &GridDensity, f2: &GridDensity) -> Result<f64> {
    f1.grid().ensure_same(f2.grid())?;
    let a = f1.values();
    let b = f2.values();
    let h = f1.grid().spacing();
    let total: f64 = (0..a.len() - 1)
        .map(|j| {
            let (a0, a1) = (a[j], a[j + 1]);
            let self_term = linear_times_log(a0, a1, a0.max(DENSITY_FLOOR), a1.max(DENSITY_FLOOR));
            let cross_term = linear_times_log(a0, a1, b[j].max(DENSITY_FLOOR), b[j + 1].max(DENSITY_FLOOR));
            self_term - cross_term
        })
        .sum();
    Ok(h * total)
}

/// `∫₀¹ (a0 + (a1 - a0) t) log(b0 + (b1 - b0) t) dt` for positive `b0`, `b1`.
fn linear_times_log(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let delta = b1 - b0;
    let (j0, j1) = if delta.abs() <= 1e-3 * b0.max(b1) {
        // Simpson is accurate to (delta / b)^4 here
        let (l0, lm, l1) = (b0.ln(), (0.5 * (b0 + b1)).ln(), b1.ln());
        ((l0 + 4.0 * lm + l1) / 6.0, (2.0 * lm + l1) / 6.0)
    } else {
        let g = |u: f64| u * u.ln() - u;
        let k = |u: f64| 0.5 * u * u * u.ln() - 0.25 * u * u;
        let dg = g(b1) - g(b0);
        (dg / delta, (k(b1) - k(b0) - b0 * dg) / (delta * delta))
    };
    a0 * j0 + (a1 - a0) * j1
}

/// Nonparametric Fisher-Rao metric `∫ v1 v2 / f` for perturbations `v1`, `v2` of `f`.
pub fn fisher_rao_metric(f: &GridDensity, v1: &[f64], v2: &[f64]) -> Result<f64> {
    check_len(f.values().len(), v1.len())?;
    check_len(f.values().len(), v2.len())?;
    let integrand: Vec<f64> = f
        .values()
        .iter()
        .zip(v1.iter().zip(v2))
        .map(|(&fj, (a, b))| a * b / fj.max(DENSITY_FLOOR))
        .collect();
    Ok(trapezoid(&integrand))
}
