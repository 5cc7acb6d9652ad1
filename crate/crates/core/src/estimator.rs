//! Penalized average-Hellinger estimation of the warping function.
//!
//! The loss of unit `i` is `L_i = ½ ∫ (√g_i − √(f_i ⊙ β))²`, which equals the
//! squared Hellinger distance between `g_i` and `f_i ⊙ β` up to the density
//! floor. The objective is the mean loss plus `λ ∫ w²`, minimized over the
//! B-spline coefficients of `w` by gradient descent.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_density::{floored_sqrt, trapezoid, trapezoid_product, Grid, GridDensity, Pchip};
use crate::sphere_geometry::{fisher_rao_distance, hellinger};
use crate::warping::{
    act, act_raw, combine, weight_to_warp, BSplineBasis, BasisExpansion, WarpingFunction,
    DEFAULT_N_BASIS, DEFAULT_ORDER,
};

pub const GRADIENT_STEP: f64 = 1e-6;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
const CV_TIE_TOLERANCE: f64 = 1e-12;

/// Pairs of densities on one shared grid.
#[derive(Debug, Clone)]
pub struct RegressionData {
    grid: Grid,
    pairs: Vec<(GridDensity, GridDensity)>,
    groups: Vec<PredictorGroup>,
    sqrt_g: Vec<Vec<f64>>,
    group_of: Vec<usize>,
}

/// Units sharing one predictor density. The loss of the whole group needs a
/// single action per warp: `Σ L_i = ½ Σ ∫ (√g_i − ḡ)² + ½ m ∫ (ḡ − √h)²`
/// with `ḡ` the mean of the `√g_i`. Only the second term depends on the warp,
/// and it is evaluated without cancellation.
#[derive(Debug, Clone)]
struct PredictorGroup {
    interp: Pchip,
    members: Vec<usize>,
    mean_sqrt_g: Vec<f64>,
    spread: f64,
}

impl RegressionData {
    pub fn new(pairs: Vec<(GridDensity, GridDensity)>) -> Result<Self> {
        let Some((first, _)) = pairs.first() else {
            return Err(Error::Degenerate("regression needs at least one pair".into()));
        };
        let grid = first.grid().clone();
        for (f, g) in &pairs {
            grid.ensure_same(f.grid())?;
            grid.ensure_same(g.grid())?;
        }
        let sqrt_g: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(_, g)| g.values().iter().map(|&v| floored_sqrt(v)).collect())
            .collect();

        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups: Vec<PredictorGroup> = Vec::new();
        let mut group_of = Vec::with_capacity(pairs.len());
        for (i, (f, _)) in pairs.iter().enumerate() {
            let key: Vec<u64> = f.values().iter().map(|v| v.to_bits()).collect();
            let gi = *index.entry(key).or_insert_with(|| {
                groups.push(PredictorGroup {
                    interp: Pchip::new(f.values()),
                    members: Vec::new(),
                    mean_sqrt_g: vec![0.0; grid.n_points()],
                    spread: 0.0,
                });
                groups.len() - 1
            });
            groups[gi].members.push(i);
            group_of.push(gi);
        }
        for group in &mut groups {
            let m = group.members.len() as f64;
            for &i in &group.members {
                for (s, v) in group.mean_sqrt_g.iter_mut().zip(&sqrt_g[i]) {
                    *s += v / m;
                }
            }
            group.spread = group
                .members
                .iter()
                .map(|&i| 0.5 * squared_distance(&sqrt_g[i], &group.mean_sqrt_g))
                .sum();
        }
        Ok(Self {
            grid,
            pairs,
            groups,
            sqrt_g,
            group_of,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(GridDensity, GridDensity)] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<(GridDensity, GridDensity)> {
        self.pairs
    }

    /// Number of distinct predictor densities.
    pub fn n_distinct_predictors(&self) -> usize {
        self.groups.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.pairs[i].clone()).collect())
    }

    /// Exchange the roles of predictor and outcome.
    pub fn swapped(&self) -> Result<Self> {
        Self::new(
            self.pairs
                .iter()
                .map(|(f, g)| (g.clone(), f.clone()))
                .collect(),
        )
    }

    /// Warped predictors `f ⊙ β` of every group, as square roots.
    fn warped_groups(&self, beta: &WarpingFunction) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .map(|group| {
                let mut h = act_raw(&group.interp, beta);
                let mass = trapezoid(&h);
                for v in &mut h {
                    *v = floored_sqrt(*v / mass);
                }
                h
            })
            .collect()
    }

    /// Mean of the unit losses at a warp.
    pub(crate) fn mean_loss(&self, beta: &WarpingFunction) -> f64 {
        let total: f64 = self
            .groups
            .iter()
            .zip(self.warped_groups(beta))
            .map(|(group, sqrt_h)| {
                group.spread
                    + 0.5 * group.members.len() as f64 * squared_distance(&group.mean_sqrt_g, &sqrt_h)
            })
            .sum();
        total / self.n() as f64
    }

    /// Loss `L_i` of every unit at a warp.
    pub(crate) fn unit_losses(&self, beta: &WarpingFunction) -> Vec<f64> {
        let warped = self.warped_groups(beta);
        (0..self.n())
            .map(|i| {
                0.5 * squared_distance(&self.sqrt_g[i], &warped[self.group_of[i]])
            })
            .collect()
    }
}

/// `∫ (a − b)²` by the trapezoid rule.
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    trapezoid_product(&d, &d)
}

/// Settings of the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Basis size `K`; the weight function has `K + 1` coefficients.
    pub n_basis: usize,
    pub order: usize,
    pub lambda: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub cv_folds: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_basis: DEFAULT_N_BASIS,
            order: DEFAULT_ORDER,
            lambda: 1e-4,
            max_iter: 500,
            grad_tol: 1e-6,
            cv_folds: 5,
            lambda_grid: default_lambda_grid(),
        }
    }
}

/// Seven log-spaced values from 1e-4 to 1e-2.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..7).map(|k| 10f64.powf(-4.0 + k as f64 / 3.0)).collect()
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        BSplineBasis::new(self.n_basis, self.order)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config("grad_tol must be positive".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lambda grid must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// One entry of a cross-validation curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub lambda: f64,
    /// Mean held-out squared Hellinger distance.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_best: f64,
    pub seed: u64,
    pub folds: usize,
    pub scores: Vec<CvScore>,
}

/// Output of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpFit {
    pub coefficients: BasisExpansion,
    pub beta_hat: WarpingFunction,
    pub lambda_used: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// `H(g_i, f_i ⊙ β̂)` for every unit.
    pub per_unit_hellinger: Vec<f64>,
    pub cross_validation: Option<CvResult>,
}

impl WarpFit {
    pub fn mean_hellinger(&self) -> f64 {
        self.per_unit_hellinger.iter().sum::<f64>() / self.per_unit_hellinger.len() as f64
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the starting value")
    }
}

/// Objective evaluator with the basis tabulated once.
pub(crate) struct Problem<'a> {
    data: &'a RegressionData,
    design: Vec<Vec<f64>>,
    lambda: f64,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(data: &'a RegressionData, n_basis: usize, order: usize, lambda: f64) -> Result<Self> {
        let design = BSplineBasis::new(n_basis, order)?.design(data.grid());
        Ok(Self {
            data,
            design,
            lambda,
        })
    }

    pub(crate) fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub(crate) fn warp(&self, alpha: &[f64]) -> Result<WarpingFunction> {
        weight_to_warp(&combine(&self.design, alpha), self.data.grid())
    }

    pub(crate) fn penalty(&self, alpha: &[f64]) -> f64 {
        let w = combine(&self.design, alpha);
        self.lambda * trapezoid_product(&w, &w)
    }

    /// Objective value; infinite where the warp cannot be represented.
    pub(crate) fn value(&self, alpha: &[f64]) -> f64 {
        match self.warp(alpha) {
            Ok(beta) => self.data.mean_loss(&beta) + self.penalty(alpha),
            Err(_) => f64::INFINITY,
        }
    }

    pub(crate) fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let mut probe = alpha.to_vec();
        (0..alpha.len())
            .map(|k| {
                probe[k] = alpha[k] + GRADIENT_STEP;
                let up = self.value(&probe);
                probe[k] = alpha[k] - GRADIENT_STEP;
                let down = self.value(&probe);
                probe[k] = alpha[k];
                (up - down) / (2.0 * GRADIENT_STEP)
            })
            .collect()
    }
}

fn check_alpha(alpha: &BasisExpansion, data: &RegressionData) -> Result<()> {
    BasisExpansion::new(alpha.n_basis, alpha.order, alpha.coefficients.clone())?;
    data.grid();
    Ok(())
}

/// Penalized objective `(1/n) Σ L_i + λ ∫ w²`.
pub fn objective(alpha: &BasisExpansion, data: &RegressionData, lambda: f64) -> Result<f64> {
    check_alpha(alpha, data)?;
    let problem = Problem::new(data, alpha.n_basis, alpha.order, lambda)?;
    let beta = problem.warp(&alpha.coefficients)?;
    Ok(data.mean_loss(&beta) + problem.penalty(&alpha.coefficients))
}

/// Central finite-difference gradient of [`objective`] in coefficient space.
pub fn gradient(alpha: &BasisExpansion, data: &RegressionData, lambda: f64) -> Result<Vec<f64>> {
    check_alpha(alpha, data)?;
    let problem = Problem::new(data, alpha.n_basis, alpha.order, lambda)?;
    Ok(problem.gradient(&alpha.coefficients))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimize the objective from the identity warp.
///
/// Non-convergence is reported through `converged`, never as an error.
pub fn fit(data: &RegressionData, config: &FitConfig) -> Result<WarpFit> {
    config.validate()?;
    let problem = Problem::new(data, config.n_basis, config.order, config.lambda)?;
    let dim = config.n_basis + 1;
    let mut alpha = vec![0.0; dim];
    let mut value = problem.value(&alpha);
    let mut grad = problem.gradient(&alpha);
    let mut trace = vec![value];
    let mut step = 1.0;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter {
        let gnorm = norm(&grad);
        if gnorm < config.grad_tol {
            converged = true;
            break;
        }
        // Barzilai-Borwein guess for the trial step, then Armijo backtracking
        if let Some((prev_alpha, prev_grad)) = &previous {
            let s: Vec<f64> = alpha.iter().zip(prev_alpha).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(prev_grad).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            step = if sy > 0.0 { ss / sy } else { step * 2.0 };
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let trial_value = problem.value(&trial);
            if trial_value <= value - ARMIJO_C * step * gnorm * gnorm {
                accepted = Some((trial, trial_value));
                break;
            }
            step *= BACKTRACK;
        }
        let Some((next, next_value)) = accepted else {
            break;
        };
        iterations += 1;
        let next_grad = problem.gradient(&next);
        previous = Some((std::mem::replace(&mut alpha, next), std::mem::replace(&mut grad, next_grad)));
        value = next_value;
        trace.push(value);
    }
    let gradient_norm = norm(&grad);
    if !converged && gradient_norm < config.grad_tol {
        converged = true;
    }
    let beta_hat = problem.warp(&alpha)?;
    let per_unit_hellinger = per_unit_hellinger(data, &beta_hat)?;
    Ok(WarpFit {
        coefficients: BasisExpansion::new(config.n_basis, config.order, alpha)?,
        beta_hat,
        lambda_used: config.lambda,
        objective_trace: trace,
        converged,
        iterations,
        gradient_norm,
        per_unit_hellinger,
        cross_validation: None,
    })
}

/// `H(g_i, f_i ⊙ β)` for every unit.
pub fn per_unit_hellinger(data: &RegressionData, beta: &WarpingFunction) -> Result<Vec<f64>> {
    data.pairs
        .iter()
        .map(|(f, g)| hellinger(g, &act(f, beta)?))
        .collect()
}

/// Mean Fisher-Rao distance `(1/n) Σ d_R(g_i, f_i ⊙ β)`.
pub fn mean_fisher_rao(data: &RegressionData, beta: &WarpingFunction) -> Result<f64> {
    let total = data
        .pairs
        .iter()
        .map(|(f, g)| fisher_rao_distance(g, &act(f, beta)?))
        .sum::<Result<f64>>()?;
    Ok(total / data.n() as f64)
}

/// Select λ by k-fold cross-validation on shuffled, contiguous folds.
pub fn cross_validate(data: &RegressionData, config: &FitConfig, seed: u64) -> Result<CvResult> {
    config.validate()?;
    let n = data.n();
    let folds = config.cv_folds;
    if n < folds {
        return Err(Error::Config(format!(
            "{folds}-fold cross-validation needs at least {folds} pairs, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bounds: Vec<usize> = (0..=folds).map(|k| k * n / folds).collect();
    let splits: Vec<(RegressionData, Vec<usize>)> = (0..folds)
        .map(|k| {
            let held: Vec<usize> = order[bounds[k]..bounds[k + 1]].to_vec();
            let train: Vec<usize> = order[..bounds[k]]
                .iter()
                .chain(&order[bounds[k + 1]..])
                .copied()
                .collect();
            Ok((data.subset(&train)?, held))
        })
        .collect::<Result<_>>()?;

    let scores: Vec<CvScore> = config
        .lambda_grid
        .par_iter()
        .map(|&lambda| {
            let cfg = FitConfig {
                lambda,
                ..config.clone()
            };
            let mut total = 0.0;
            for (train, held) in &splits {
                let fitted = fit(train, &cfg)?;
                for &i in held {
                    let (f, g) = &data.pairs[i];
                    total += hellinger(g, &act(f, &fitted.beta_hat)?)?.powi(2);
                }
            }
            Ok(CvScore {
                lambda,
                score: total / n as f64,
            })
        })
        .collect::<Result<_>>()?;

    let mut best = scores[0];
    for s in &scores[1..] {
        let better = s.score < best.score - CV_TIE_TOLERANCE;
        let tie = (s.score - best.score).abs() <= CV_TIE_TOLERANCE;
        if better || (tie && s.lambda > best.lambda) {
            best = *s;
        }
    }
    Ok(CvResult {
        lambda_best: best.lambda,
        seed,
        folds,
        scores,
    })
}

/// Cross-validate λ, then fit on all pairs with the selected value.
pub fn fit_cross_validated(data: &RegressionData, config: &FitConfig, seed: u64) -> Result<WarpFit> {
    let cv = cross_validate(data, config, seed)?;
    let mut fitted = fit(
        data,
        &FitConfig {
            lambda: cv.lambda_best,
            ..config.clone()
        },
    )?;
    fitted.cross_validation = Some(cv);
    Ok(fitted)
}

/// Predicted outcome density `f ⊙ β̂`.
pub fn predict(f: &GridDensity, fit: &WarpFit) -> Result<GridDensity> {
    act(f, &fit.beta_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warping::{expansion_to_warp, invert, warp_distance};
    use rand::Rng;

    fn grid() -> Grid {
        Grid::uniform(1001).unwrap()
    }

    fn true_alpha() -> BasisExpansion {
        BasisExpansion::new(4, 4, vec![1.5; 5]).unwrap()
    }

    fn jittered_predictors(grid: &Grid, n: usize, seed: u64) -> Vec<GridDensity> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = 2.0 * (1.0 + rng.random_range(-0.2..0.2));
                let b = 5.0 * (1.0 + rng.random_range(-0.2..0.2));
                GridDensity::beta(grid, a, b).unwrap()
            })
            .collect()
    }

    fn noiseless(grid: &Grid, n: usize, alpha: &BasisExpansion, seed: u64) -> RegressionData {
        let beta = expansion_to_warp(alpha, grid).unwrap();
        RegressionData::new(
            jittered_predictors(grid, n, seed)
                .into_iter()
                .map(|f| {
                    let g = act(&f, &beta).unwrap();
                    (f, g)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn objective_examples() {
        let g = grid();
        let f = GridDensity::beta(&g, 2.0, 5.0).unwrap();
        let zero = BasisExpansion::zeros(4).unwrap();
        let same = RegressionData::new(vec![(f.clone(), f.clone()); 3]).unwrap();
        assert!(objective(&zero, &same, 0.0).unwrap().abs() < 1e-8);

        let data = noiseless(&g, 10, &true_alpha(), 1);
        assert!(objective(&true_alpha(), &data, 0.0).unwrap().abs() < 1e-6);

        let one = RegressionData::new(vec![(
            GridDensity::uniform(&g),
            GridDensity::from_fn(&g, |x| 6.0 * x * (1.0 - x)).unwrap(),
        )])
        .unwrap();
        let h2 = 1.0 - 6f64.sqrt() * std::f64::consts::PI / 8.0;
        let value = objective(&zero, &one, 0.0).unwrap();
        assert!((value - h2).abs() < 1e-3);
        assert!((value - 0.03818).abs() < 1e-3);
    }

    #[test]
    fn objective_equals_mean_squared_hellinger() {
        let g = grid();
        let preds = jittered_predictors(&g, 6, 4);
        let outs = jittered_predictors(&g, 6, 5);
        let data = RegressionData::new(preds.into_iter().zip(outs).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let alpha = BasisExpansion::new(4, 4, c).unwrap();
            let beta = expansion_to_warp(&alpha, &g).unwrap();
            let mean_h2 = per_unit_hellinger(&data, &beta)
                .unwrap()
                .iter()
                .map(|h| h * h)
                .sum::<f64>()
                / 6.0;
            assert!((objective(&alpha, &data, 0.0).unwrap() - mean_h2).abs() < 1e-6);
        }
    }

    #[test]
    fn grouped_and_per_unit_losses_agree() {
        let g = grid();
        let f = GridDensity::beta(&g, 2.0, 5.0).unwrap();
        let outs = jittered_predictors(&g, 5, 11);
        let pairs: Vec<_> = outs.into_iter().map(|o| (f.clone(), o)).collect();
        let data = RegressionData::new(pairs).unwrap();
        assert_eq!(data.n_distinct_predictors(), 1);
        let beta = expansion_to_warp(&true_alpha(), &g).unwrap();
        let mean: f64 = data.unit_losses(&beta).iter().sum::<f64>() / 5.0;
        assert!((mean - data.mean_loss(&beta)).abs() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_at_exact_recovery() {
        let g = grid();
        let data = noiseless(&g, 5, &true_alpha(), 2);
        let grad = gradient(&true_alpha(), &data, 0.0).unwrap();
        assert!(norm(&grad) < 1e-4, "{grad:?}");
    }

    #[test]
    fn penalty_gradient_matches_analytic() {
        let g = grid();
        let f = GridDensity::beta(&g, 2.0, 5.0).unwrap();
        let data = RegressionData::new(vec![(f.clone(), f)]).unwrap();
        let lambda = 1e-2;
        let alpha = BasisExpansion::new(4, 4, vec![0.3, -0.2, 0.5, 0.1, -0.4]).unwrap();
        let with = gradient(&alpha, &data, lambda).unwrap();
        let without = gradient(&alpha, &data, 0.0).unwrap();
        let design = alpha.basis().unwrap().design(&g);
        let w = alpha.eval(&g).unwrap();
        for k in 0..5 {
            let analytic = 2.0 * lambda * trapezoid_product(&w, &design[k]);
            assert!((with[k] - without[k] - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_secant() {
        let g = grid();
        let data = noiseless(&g, 8, &true_alpha(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..3.0)).collect();
            let dir: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let alpha = BasisExpansion::new(4, 4, c.clone()).unwrap();
            let grad = gradient(&alpha, &data, 1e-4).unwrap();
            let directional: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let t = 1e-5;
            let shifted = |s: f64| {
                let cs = c.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                objective(&BasisExpansion::new(4, 4, cs).unwrap(), &data, 1e-4).unwrap()
            };
            let secant = (shifted(t) - shifted(-t)) / (2.0 * t);
            assert!(
                (directional - secant).abs() <= 1e-4 * secant.abs().max(1e-8),
                "{directional} vs {secant}"
            );
        }
    }

    #[test]
    fn fit_recovers_identity() {
        let g = grid();
        let preds = jittered_predictors(&g, 10, 6);
        let data = RegressionData::new(preds.into_iter().map(|f| (f.clone(), f)).collect()).unwrap();
        let fitted = fit(&data, &FitConfig::default()).unwrap();
        assert!(fitted.converged);
        let d = warp_distance(&fitted.beta_hat, &WarpingFunction::identity(&g)).unwrap();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn fit_recovers_known_warp() {
        let g = grid();
        let data = noiseless(&g, 50, &true_alpha(), 7);
        let fitted = fit(&data, &FitConfig::default()).unwrap();
        let truth = expansion_to_warp(&true_alpha(), &g).unwrap();
        let d = warp_distance(&fitted.beta_hat, &truth).unwrap();
        assert!(d < 0.01, "{d}");
        assert!(fitted.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(fitted.final_objective() <= fitted.objective_trace[0]);
        // without the penalty the outcomes are reproduced
        let exact = FitConfig {
            lambda: 0.0,
            grad_tol: 1e-8,
            max_iter: 2000,
            ..FitConfig::default()
        };
        let unpenalized = fit(&data, &exact).unwrap();
        for (f, g_i) in data.pairs().iter().take(3) {
            assert!(hellinger(g_i, &predict(f, &unpenalized).unwrap()).unwrap() < 1e-3);
        }
    }

    #[test]
    fn single_pair_registration() {
        let g = grid();
        let data = noiseless(&g, 1, &true_alpha(), 8);
        let fitted = fit(&data, &FitConfig::default()).unwrap();
        assert!(fitted.final_objective() < fitted.objective_trace[0]);
        assert_eq!(fitted.per_unit_hellinger.len(), 1);
    }

    #[test]
    fn predict_with_identity_fit_returns_input() {
        let g = grid();
        let f = GridDensity::beta(&g, 2.0, 5.0).unwrap();
        let data = RegressionData::new(vec![(f.clone(), f.clone())]).unwrap();
        let fitted = fit(&data, &FitConfig::default()).unwrap();
        let out = predict(&f, &fitted).unwrap();
        for (a, b) in out.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_symmetry_on_noiseless_data() {
        let g = grid();
        let data = noiseless(&g, 20, &true_alpha(), 12);
        let forward = fit(&data, &FitConfig::default()).unwrap();
        let backward = fit(&data.swapped().unwrap(), &FitConfig::default()).unwrap();
        let d = warp_distance(&backward.beta_hat, &invert(&forward.beta_hat)).unwrap();
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn cv_ties_pick_largest_lambda() {
        let g = grid();
        let preds = jittered_predictors(&g, 10, 13);
        let data = RegressionData::new(preds.into_iter().map(|f| (f.clone(), f)).collect()).unwrap();
        let cv = cross_validate(&data, &FitConfig::default(), 1).unwrap();
        assert_eq!(cv.lambda_best, 1e-2);
        assert_eq!(cv.scores.len(), 7);
    }

    #[test]
    fn cv_on_noiseless_warped_data_is_not_pathological() {
        let g = grid();
        let data = noiseless(&g, 10, &true_alpha(), 14);
        let cv = cross_validate(&data, &FitConfig::default(), 2).unwrap();
        let best = cv.scores.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
        let at_max = cv.scores.last().unwrap().score;
        assert!(best <= at_max + 1e-6);
        let again = cross_validate(&data, &FitConfig::default(), 2).unwrap();
        assert_eq!(cv, again);
    }

    #[test]
    fn cv_needs_enough_pairs() {
        let g = grid();
        let f = GridDensity::uniform(&g);
        let data = RegressionData::new(vec![(f.clone(), f); 3]).unwrap();
        assert!(matches!(
            cross_validate(&data, &FitConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_lambda_grid_spans_range() {
        let grid = default_lambda_grid();
        assert_eq!(grid.len(), 7);
        assert!((grid[0] - 1e-4).abs() < 1e-18);
        assert!((grid[6] - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn data_validation() {
        assert!(RegressionData::new(vec![]).is_err());
        let a = GridDensity::uniform(&Grid::uniform(11).unwrap());
        let b = GridDensity::uniform(&Grid::uniform(21).unwrap());
        assert!(matches!(
            RegressionData::new(vec![(a, b)]),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = FitConfig {
            n_basis: 2,
            ..FitConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = FitConfig {
            lambda: -1.0,
            ..FitConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
