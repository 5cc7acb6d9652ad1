//! Pointwise confidence bands for the weight function and the warp.
//!
//! The fitted coefficients are an M-estimator, so their covariance is
//! estimated by the sandwich `A⁻¹ B A⁻¹ / n`, with `A` the Hessian of the
//! objective and `B` the covariance of the per-unit scores `∂L_i/∂α`. The
//! pointwise variance of `ŵ(ω) = φ(ω)ᵀ α̂` follows as `φ(ω)ᵀ Cov φ(ω)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::{Problem, RegressionData, WarpFit};
use crate::grid_density::{trapezoid_product, Grid};
use crate::warping::{weight_to_warp, WarpingFunction};

const SCORE_STEP: f64 = 1e-5;
const HESSIAN_STEP: f64 = 1e-4;
/// Eigenvalues of the Hessian below this are raised to it before inversion.
pub const HESSIAN_FLOOR: f64 = 1e-8;

/// Sandwich variance of the weight function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichVariance {
    pub grid: Grid,
    /// `C_n(ω)` at every grid node.
    pub variance: Vec<f64>,
    /// Covariance of the basis coefficients.
    pub coefficient_covariance: Vec<Vec<f64>>,
    /// Set when some Hessian eigenvalue had to be floored.
    pub hessian_floored: bool,
    pub n: usize,
}

/// Estimate, lower and upper curves on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseCI {
    pub grid: Grid,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl PointwiseCI {
    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    /// Whether `truth` lies inside the band at node `j`.
    pub fn covers(&self, j: usize, truth: f64) -> bool {
        self.lower[j] <= truth && truth <= self.upper[j]
    }
}

fn perturbed(alpha: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut out = alpha.to_vec();
    for &(k, t) in moves {
        out[k] += t;
    }
    out
}

/// Sandwich estimate of the pointwise variance of `ŵ`.
pub fn sandwich_variance(fit: &WarpFit, data: &RegressionData) -> Result<SandwichVariance> {
    let n = data.n();
    if n < 2 {
        return Err(Error::Config("sandwich variance needs at least 2 pairs".into()));
    }
    let coefs = &fit.coefficients;
    let problem = Problem::new(data, coefs.n_basis, coefs.order, fit.lambda_used)?;
    let alpha = &coefs.coefficients;
    let dim = alpha.len();
    let losses_at = |moves: &[(usize, f64)]| -> Result<Vec<f64>> {
        let beta = problem.warp(&perturbed(alpha, moves))?;
        Ok(data.unit_losses(&beta))
    };

    // per-unit scores by central differences
    let mut scores = DMatrix::<f64>::zeros(n, dim);
    for k in 0..dim {
        let up = losses_at(&[(k, SCORE_STEP)])?;
        let down = losses_at(&[(k, -SCORE_STEP)])?;
        for i in 0..n {
            scores[(i, k)] = (up[i] - down[i]) / (2.0 * SCORE_STEP);
        }
    }

    // mean Hessian of the unit losses, summed unit by unit
    let t = HESSIAN_STEP;
    let center = losses_at(&[])?;
    let mut hessian = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let up = losses_at(&[(j, t)])?;
        let down = losses_at(&[(j, -t)])?;
        hessian[(j, j)] = unit_mean(&up, &down, &center, |a, b, c| (a + b - 2.0 * c) / (t * t));
        for k in 0..j {
            let pp = losses_at(&[(j, t), (k, t)])?;
            let pm = losses_at(&[(j, t), (k, -t)])?;
            let mp = losses_at(&[(j, -t), (k, t)])?;
            let mm = losses_at(&[(j, -t), (k, -t)])?;
            let mixed = (0..n)
                .map(|i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * t * t))
                .sum::<f64>()
                / n as f64;
            hessian[(j, k)] = mixed;
            hessian[(k, j)] = mixed;
        }
    }
    // the penalty is quadratic: λ αᵀ G α has Hessian 2 λ G
    let design = problem.design();
    for j in 0..dim {
        for k in 0..dim {
            hessian[(j, k)] += 2.0 * fit.lambda_used * trapezoid_product(&design[j], &design[k]);
        }
    }

    let mean_score = scores.row_mean();
    let mut centered = scores.clone();
    for i in 0..n {
        let row = centered.row(i) - &mean_score;
        centered.set_row(i, &row);
    }
    let score_cov = centered.transpose() * &centered / n as f64;

    let eigen = hessian.symmetric_eigen();
    let mut floored = false;
    let inv_values = eigen.eigenvalues.map(|e| {
        if e < HESSIAN_FLOOR {
            floored = true;
            1.0 / HESSIAN_FLOOR
        } else {
            1.0 / e
        }
    });
    let vecs = &eigen.eigenvectors;
    let a_inv = vecs * DMatrix::from_diagonal(&inv_values) * vecs.transpose();
    let cov = &a_inv * score_cov * &a_inv / n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;

    let n_points = data.grid().n_points();
    let variance = (0..n_points)
        .map(|j| {
            let phi = DVector::from_iterator(dim, design.iter().map(|row| row[j]));
            (phi.transpose() * &cov * &phi)[(0, 0)].max(0.0)
        })
        .collect();
    Ok(SandwichVariance {
        grid: data.grid().clone(),
        variance,
        coefficient_covariance: (0..dim)
            .map(|j| (0..dim).map(|k| cov[(j, k)]).collect())
            .collect(),
        hessian_floored: floored,
        n,
    })
}

fn unit_mean(a: &[f64], b: &[f64], c: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((&x, &y), &z)| f(x, y, z))
        .sum::<f64>()
        / a.len() as f64
}

/// Two-sided standard normal critical value for a confidence level.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 * (1.0 + level)))
}

/// Band for `w` from a precomputed variance.
pub fn w_band(fit: &WarpFit, variance: &SandwichVariance, level: f64) -> Result<PointwiseCI> {
    let z = normal_critical_value(level)?;
    let grid = variance.grid.clone();
    let estimate = fit.coefficients.eval(&grid)?;
    let half: Vec<f64> = variance.variance.iter().map(|c| z * c.sqrt()).collect();
    Ok(PointwiseCI {
        lower: estimate.iter().zip(&half).map(|(w, h)| w - h).collect(),
        upper: estimate.iter().zip(&half).map(|(w, h)| w + h).collect(),
        estimate,
        grid,
        level,
    })
}

/// Band for `β`: the pointwise envelope of `β̂` and the warps of the two `w`-band edges.
pub fn beta_band(fit: &WarpFit, variance: &SandwichVariance, level: f64) -> Result<PointwiseCI> {
    let wb = w_band(fit, variance, level)?;
    let grid = wb.grid.clone();
    let estimate = fit.beta_hat.beta_values().to_vec();
    let from_lower = weight_to_warp(&wb.lower, &grid)?;
    let from_upper = weight_to_warp(&wb.upper, &grid)?;
    let curves = [
        estimate.as_slice(),
        from_lower.beta_values(),
        from_upper.beta_values(),
    ];
    let n = grid.n_points();
    let lower = (0..n)
        .map(|j| curves.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min))
        .collect();
    let upper = (0..n)
        .map(|j| curves.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(PointwiseCI {
        grid,
        estimate,
        lower,
        upper,
        level,
    })
}

/// Pointwise interval for the weight function, `ŵ ± z √C_n`.
pub fn ci_for_w(fit: &WarpFit, data: &RegressionData, level: f64) -> Result<PointwiseCI> {
    normal_critical_value(level)?;
    w_band(fit, &sandwich_variance(fit, data)?, level)
}

/// Pointwise interval for the warping function.
pub fn ci_for_beta(fit: &WarpFit, data: &RegressionData, level: f64) -> Result<PointwiseCI> {
    normal_critical_value(level)?;
    beta_band(fit, &sandwich_variance(fit, data)?, level)
}

/// Lower and upper envelopes of a `β` band as warping functions.
pub fn band_warps(band: &PointwiseCI) -> Result<(WarpingFunction, WarpingFunction)> {
    Ok((
        WarpingFunction::from_monotone_values(&band.grid, band.lower.clone())?,
        WarpingFunction::from_monotone_values(&band.grid, band.upper.clone())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, FitConfig};
    use crate::grid_density::GridDensity;
    use crate::warping::act;
    use rand::{Rng, SeedableRng};

    fn grid() -> Grid {
        Grid::uniform(1001).unwrap()
    }

    fn noisy_data(grid: &Grid, n: usize, seed: u64) -> RegressionData {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = weight_to_warp(&vec![1.5; grid.n_points()], grid).unwrap();
        let pairs = (0..n)
            .map(|_| {
                let f = GridDensity::beta(grid, 2.0, 5.0).unwrap();
                let a = 2.0 * (1.0 + rng.random_range(-0.1..0.1));
                let b = 5.0 * (1.0 + rng.random_range(-0.1..0.1));
                let g = act(&GridDensity::beta(grid, a, b).unwrap(), &truth).unwrap();
                (f, g)
            })
            .collect();
        RegressionData::new(pairs).unwrap()
    }

    fn tight() -> FitConfig {
        FitConfig {
            lambda: 0.0,
            grad_tol: 1e-9,
            max_iter: 5000,
            ..FitConfig::default()
        }
    }

    #[test]
    fn zero_residuals_give_zero_variance() {
        let g = grid();
        let data = noisy_data(&g, 10, 1);
        let fitted = fit(&data, &tight()).unwrap();
        // rebuild outcomes that the fitted warp reproduces exactly
        let exact = RegressionData::new(
            data.pairs()
                .iter()
                .map(|(f, _)| (f.clone(), act(f, &fitted.beta_hat).unwrap()))
                .collect(),
        )
        .unwrap();
        let sv = sandwich_variance(&fitted, &exact).unwrap();
        assert!(sv.variance.iter().all(|&c| c.abs() < 1e-10));
        let band = ci_for_beta(&fitted, &exact, 0.95).unwrap();
        for (l, u) in band.lower.iter().zip(&band.upper) {
            assert!((u - l).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_the_data_halves_the_variance() {
        let g = grid();
        let data = noisy_data(&g, 12, 2);
        let fitted = fit(&data, &tight()).unwrap();
        let doubled = RegressionData::new(
            data.pairs().iter().chain(data.pairs()).cloned().collect(),
        )
        .unwrap();
        let once = sandwich_variance(&fitted, &data).unwrap();
        let twice = sandwich_variance(&fitted, &doubled).unwrap();
        for (a, b) in once.variance.iter().zip(&twice.variance) {
            assert!((a - 2.0 * b).abs() <= 1e-8 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn bands_are_ordered_and_nested() {
        let g = grid();
        let data = noisy_data(&g, 30, 3);
        let fitted = fit(&data, &tight()).unwrap();
        let sv = sandwich_variance(&fitted, &data).unwrap();
        assert!(sv.variance.iter().all(|&c| c >= 0.0));
        assert!(sv.variance[250..750].iter().all(|&c| c > 0.0));
        let w95 = w_band(&fitted, &sv, 0.95).unwrap();
        let w90 = w_band(&fitted, &sv, 0.90).unwrap();
        let w99 = w_band(&fitted, &sv, 0.99).unwrap();
        for j in 0..g.n_points() {
            assert!(w95.lower[j] <= w95.estimate[j] && w95.estimate[j] <= w95.upper[j]);
            assert!(w95.lower[j] <= w90.lower[j] && w90.upper[j] <= w95.upper[j]);
            assert!(w99.width()[j] >= w95.width()[j]);
        }
        let b95 = beta_band(&fitted, &sv, 0.95).unwrap();
        for j in 0..g.n_points() {
            assert!(b95.lower[j] <= b95.estimate[j] && b95.estimate[j] <= b95.upper[j]);
        }
        assert_eq!((b95.lower[0], b95.upper[0]), (0.0, 0.0));
        assert_eq!((b95.lower[1000], b95.upper[1000]), (1.0, 1.0));
        band_warps(&b95).unwrap();
    }

    #[test]
    fn identity_data_band_contains_zero() {
        let g = grid();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pairs = (0..10)
            .map(|_| {
                let f = GridDensity::beta(
                    &g,
                    2.0 + rng.random_range(-0.3..0.3),
                    5.0 + rng.random_range(-0.5..0.5),
                )
                .unwrap();
                (f.clone(), f)
            })
            .collect();
        let data = RegressionData::new(pairs).unwrap();
        let fitted = fit(&data, &FitConfig::default()).unwrap();
        let band = ci_for_w(&fitted, &data, 0.95).unwrap();
        assert!(band.lower.iter().zip(&band.upper).all(|(l, u)| *l <= 0.0 && 0.0 <= *u));
    }

    #[test]
    fn critical_values() {
        assert!((normal_critical_value(0.95).unwrap() - 1.959964).abs() < 1e-5);
        assert!(normal_critical_value(1.0).is_err());
        assert!(normal_critical_value(0.0).is_err());
    }

    #[test]
    fn needs_two_pairs() {
        let g = grid();
        let f = GridDensity::uniform(&g);
        let data = RegressionData::new(vec![(f.clone(), f)]).unwrap();
        let fitted = fit(&data, &FitConfig::default()).unwrap();
        assert!(matches!(sandwich_variance(&fitted, &data), Err(Error::Config(_))));
    }
}
