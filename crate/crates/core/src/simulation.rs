//! Synthetic data under the tangent-error model and a replication harness.
//!
//! Each outcome is `g_i = (exp_{p_i}(c_i u_i))²` with `p_i = √(f_i ⊙ β*)`, a
//! random unit tangent direction `u_i` and a uniform multiplier `c_i`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, fit_cross_validated, FitConfig, RegressionData, WarpFit};
use crate::grid_density::{
    invert_monotone, trapezoid_product, BandwidthRule, Grid, GridDensity, SampleSet, VariableTag,
};
use crate::inference::{sandwich_variance, w_band};
use crate::sphere_geometry::{exp_map, hellinger, srf, srf_inverse, HalfDensity, TangentVector};
use crate::warping::{act, warp_distance, weight_to_warp, WarpingFunction};

/// Number of cosine terms in a random tangent direction.
pub const FOURIER_TERMS: usize = 3;
const MAX_REDRAWS: usize = 10;
const MIN_DIRECTION_NORM: f64 = 1e-8;

/// Constant weight of the default true warp.
pub const DEFAULT_TRUE_WEIGHT: f64 = 1.5;

/// The warp that generates the outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueWarp {
    /// `β` with constant weight function `w ≡ c`.
    ConstantWeight(f64),
    Custom(WarpingFunction),
}

impl TrueWarp {
    pub fn resolve(&self, grid: &Grid) -> Result<WarpingFunction> {
        match self {
            TrueWarp::ConstantWeight(c) => weight_to_warp(&vec![*c; grid.n_points()], grid),
            TrueWarp::Custom(b) => {
                grid.ensure_same(b.grid())?;
                Ok(b.clone())
            }
        }
    }
}

/// Beta predictor densities with optional multiplicative jitter on the shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorFamily {
    pub a: f64,
    pub b: f64,
    /// Each shape is multiplied by `1 + U(−jitter, jitter)` per unit.
    pub jitter: f64,
}

impl Default for PredictorFamily {
    fn default() -> Self {
        Self {
            a: 2.0,
            b: 5.0,
            jitter: 0.0,
        }
    }
}

impl PredictorFamily {
    fn draw(&self, grid: &Grid, rng: &mut impl Rng) -> Result<GridDensity> {
        if self.jitter == 0.0 {
            return GridDensity::beta(grid, self.a, self.b);
        }
        let a = self.a * (1.0 + rng.random_range(-self.jitter..=self.jitter));
        let b = self.b * (1.0 + rng.random_range(-self.jitter..=self.jitter));
        GridDensity::beta(grid, a, b)
    }
}

/// How each replication picks the penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    CrossValidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Observations per predictor density; 0 fits the true densities.
    pub m1: usize,
    /// Observations per outcome density; 0 fits the true densities.
    pub m2: usize,
    pub noise_halfwidth: f64,
    pub true_warp: TrueWarp,
    pub predictor: PredictorFamily,
    pub seed: u64,
    pub replications: usize,
    pub grid_points: usize,
    pub fit: FitConfig,
    pub lambda: LambdaChoice,
    /// Bandwidth rule of the estimated-density arm.
    pub bandwidth: BandwidthRule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m1: 0,
            m2: 0,
            noise_halfwidth: 0.1,
            true_warp: TrueWarp::ConstantWeight(DEFAULT_TRUE_WEIGHT),
            predictor: PredictorFamily::default(),
            seed: 0,
            replications: 50,
            grid_points: crate::grid_density::DEFAULT_GRID_POINTS,
            fit: FitConfig::default(),
            lambda: LambdaChoice::Fixed(FitConfig::default().lambda),
            bandwidth: BandwidthRule::PooledSilverman,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.noise_halfwidth >= 0.0 && self.noise_halfwidth < PI) {
            return Err(Error::Config(format!(
                "noise half-width {} must lie in [0, pi)",
                self.noise_halfwidth
            )));
        }
        if (self.m1 == 0) != (self.m2 == 0) {
            return Err(Error::Config(
                "m1 and m2 must both be zero or both be positive".into(),
            ));
        }
        if self.m1 == 1 || self.m2 == 1 {
            return Err(Error::Config("density estimation needs at least 2 observations".into()));
        }
        let p = &self.predictor;
        if !(p.a > 0.0 && p.b > 0.0 && (0.0..1.0).contains(&p.jitter)) {
            return Err(Error::Config(format!(
                "predictor Beta({}, {}) with jitter {} is invalid",
                p.a, p.b, p.jitter
            )));
        }
        if let LambdaChoice::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be non-negative")));
            }
        }
        self.fit.validate()
    }

    /// True arm when both sample sizes are zero.
    pub fn uses_true_densities(&self) -> bool {
        self.m1 == 0 && self.m2 == 0
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::uniform(self.grid_points)
    }

    /// Generator for one replication: the seed with the replication as stream.
    pub fn replication_rng(&self, replication: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replication as u64);
        rng
    }
}

/// Random unit tangent direction at `p`.
///
/// A cosine sum `s(ω) = Σ z_j cos(jπω)` with standard normal `z_j` is applied
/// multiplicatively, `v = p s`, then projected and normalized.
pub fn tangent_direction(p: &HalfDensity, rng: &mut impl Rng) -> Result<TangentVector> {
    for _ in 0..MAX_REDRAWS {
        let v = draw_direction(p, rng)?;
        if let Some(u) = v {
            return Ok(u);
        }
    }
    Err(Error::Numerical(format!(
        "no usable tangent direction after {MAX_REDRAWS} draws"
    )))
}

fn draw_direction(p: &HalfDensity, rng: &mut impl Rng) -> Result<Option<TangentVector>> {
    let z: Vec<f64> = (0..FOURIER_TERMS).map(|_| StandardNormal.sample(rng)).collect();
    let values: Vec<f64> = p
        .grid()
        .points()
        .iter()
        .zip(p.values())
        .map(|(&w, &pv)| {
            let s: f64 = z
                .iter()
                .enumerate()
                .map(|(j, zj)| zj * ((j + 1) as f64 * PI * w).cos())
                .sum();
            pv * s
        })
        .collect();
    let v = TangentVector::project(p.clone(), values)?;
    let norm = v.norm();
    if norm < MIN_DIRECTION_NORM {
        return Ok(None);
    }
    Ok(Some(v.scaled(1.0 / norm)))
}

/// One pair from the model, also returning the tangent error `e = c u`.
pub fn generate_pair_with_error(
    f: &GridDensity,
    true_beta: &WarpingFunction,
    noise_halfwidth: f64,
    rng: &mut impl Rng,
) -> Result<(GridDensity, GridDensity, TangentVector)> {
    if !(noise_halfwidth >= 0.0 && noise_halfwidth < PI) {
        return Err(Error::Config(format!(
            "noise half-width {noise_halfwidth} must lie in [0, pi)"
        )));
    }
    let p = srf(&act(f, true_beta)?);
    for _ in 0..MAX_REDRAWS {
        let Some(u) = draw_direction(&p, rng)? else {
            continue;
        };
        let c = if noise_halfwidth > 0.0 {
            rng.random_range(-noise_halfwidth..noise_halfwidth)
        } else {
            0.0
        };
        let e = u.scaled(c);
        let q = exp_map(&p, &e)?;
        // a negative half density would lose its sign when squared
        if q.values().iter().any(|&v| v < 0.0) {
            continue;
        }
        return Ok((f.clone(), srf_inverse(&q), e));
    }
    Err(Error::Numerical(format!(
        "no admissible tangent error after {MAX_REDRAWS} draws"
    )))
}

/// One `(f, g)` pair with `g = srf_inverse(exp_p(c u))`.
pub fn generate_pair(
    f: &GridDensity,
    true_beta: &WarpingFunction,
    noise_halfwidth: f64,
    rng: &mut impl Rng,
) -> Result<(GridDensity, GridDensity)> {
    generate_pair_with_error(f, true_beta, noise_halfwidth, rng).map(|(f, g, _)| (f, g))
}

/// Inverse-CDF draws from a grid density.
pub fn sample_from_density(
    f: &GridDensity,
    m: usize,
    unit_id: &str,
    variable: VariableTag,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    if m == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let u: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let draws = invert_monotone(&f.cdf(), f.grid().points(), &u);
    SampleSet::new(unit_id, variable, draws)
}

/// Data of one replication.
#[derive(Debug, Clone)]
pub struct SimDataset {
    /// Densities the estimator sees (kernel estimates in the estimated arm).
    pub data: RegressionData,
    /// The true `(f_i, g_i)`.
    pub truth: Vec<(GridDensity, GridDensity)>,
    pub true_beta: WarpingFunction,
}

/// Generate replication `replication` of a configuration.
pub fn generate_dataset(config: &SimConfig, replication: usize) -> Result<SimDataset> {
    config.validate()?;
    let grid = config.grid()?;
    let true_beta = config.true_warp.resolve(&grid)?;
    let mut rng = config.replication_rng(replication);
    let mut truth = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let f = config.predictor.draw(&grid, &mut rng)?;
        truth.push(generate_pair(&f, &true_beta, config.noise_halfwidth, &mut rng)?);
    }
    let observed = if config.uses_true_densities() {
        truth.clone()
    } else {
        truth
            .iter()
            .enumerate()
            .map(|(i, (f, g))| {
                let id = format!("unit{i}");
                let xf = sample_from_density(f, config.m1, &id, VariableTag::Predictor, &mut rng)?;
                let xg = sample_from_density(g, config.m2, &id, VariableTag::Outcome, &mut rng)?;
                Ok((
                    config.bandwidth.estimate(&xf, &grid, config.n)?,
                    config.bandwidth.estimate(&xg, &grid, config.n)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(SimDataset {
        data: RegressionData::new(observed)?,
        truth,
        true_beta,
    })
}

/// Fit a generated dataset with the configured penalty rule.
pub fn fit_dataset(config: &SimConfig, dataset: &SimDataset, replication: usize) -> Result<WarpFit> {
    match config.lambda {
        LambdaChoice::Fixed(lambda) => fit(
            &dataset.data,
            &FitConfig {
                lambda,
                ..config.fit.clone()
            },
        ),
        LambdaChoice::CrossValidate => fit_cross_validated(
            &dataset.data,
            &config.fit,
            config.seed.wrapping_add(replication as u64),
        ),
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub warp_distance: Option<f64>,
    /// Mean `H(g_i, f̃_i ⊙ β̂)` against the true outcomes, `f̃_i` the fitted predictor.
    pub mean_hellinger: Option<f64>,
    /// Mean `H(g_i, f_i)` of the true densities.
    pub baseline_hellinger: Option<f64>,
    pub lambda_used: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

/// Aggregates over replications. `sd_*` is the spread across replications and
/// `se_*` the standard error of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub mean_warp_distance: f64,
    pub sd_warp_distance: f64,
    pub se_warp_distance: f64,
    pub mean_hellinger: f64,
    pub sd_hellinger: f64,
    pub se_hellinger: f64,
    pub mean_baseline_hellinger: f64,
    pub n_failed: usize,
    pub n_not_converged: usize,
    pub per_replication: Vec<ReplicationRecord>,
}

fn replication_metrics(config: &SimConfig, replication: usize) -> Result<ReplicationRecord> {
    let dataset = generate_dataset(config, replication)?;
    let fitted = fit_dataset(config, &dataset, replication)?;
    let n = dataset.truth.len() as f64;
    let mut fitted_h = 0.0;
    let mut baseline = 0.0;
    for ((f, g), (f_seen, _)) in dataset.truth.iter().zip(dataset.data.pairs()) {
        fitted_h += hellinger(g, &act(f_seen, &fitted.beta_hat)?)?;
        baseline += hellinger(g, f)?;
    }
    Ok(ReplicationRecord {
        replication,
        warp_distance: Some(warp_distance(&fitted.beta_hat, &dataset.true_beta)?),
        mean_hellinger: Some(fitted_h / n),
        baseline_hellinger: Some(baseline / n),
        lambda_used: Some(fitted.lambda_used),
        converged: fitted.converged,
        iterations: fitted.iterations,
        error: None,
    })
}

/// Run one replication; failures are recorded in the record.
pub fn run_replication(config: &SimConfig, replication: usize) -> ReplicationRecord {
    replication_metrics(config, replication).unwrap_or_else(|e| ReplicationRecord {
        replication,
        warp_distance: None,
        mean_hellinger: None,
        baseline_hellinger: None,
        lambda_used: None,
        converged: false,
        iterations: 0,
        error: Some(e.to_string()),
    })
}

/// Mean, standard deviation and standard error.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    (mean, sd, sd / (k as f64).sqrt())
}

/// Run all replications, in parallel, and aggregate.
pub fn run_replications(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    if config.replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    let records: Vec<ReplicationRecord> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(config, r))
        .collect();
    let collect = |pick: fn(&ReplicationRecord) -> Option<f64>| -> Vec<f64> {
        records.iter().filter_map(pick).collect()
    };
    let (mean_d, sd_d, se_d) = summarize(&collect(|r| r.warp_distance));
    let (mean_h, sd_h, se_h) = summarize(&collect(|r| r.mean_hellinger));
    let (mean_base, _, _) = summarize(&collect(|r| r.baseline_hellinger));
    Ok(SimResult {
        mean_warp_distance: mean_d,
        sd_warp_distance: sd_d,
        se_warp_distance: se_d,
        mean_hellinger: mean_h,
        sd_hellinger: sd_h,
        se_hellinger: se_h,
        mean_baseline_hellinger: mean_base,
        n_failed: records.iter().filter(|r| r.error.is_some()).count(),
        n_not_converged: records
            .iter()
            .filter(|r| r.error.is_none() && !r.converged)
            .count(),
        per_replication: records,
    })
}

/// Pointwise coverage of the `w` band at a few locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub level: f64,
    pub omegas: Vec<f64>,
    /// Fraction of usable replications whose band covered the true `w` at each location.
    pub coverage: Vec<f64>,
    pub n_used: usize,
    pub n_failed: usize,
}

/// Coverage of the pointwise `w` interval for a constant-weight truth.
pub fn run_coverage(config: &SimConfig, level: f64, omegas: &[f64]) -> Result<CoverageResult> {
    config.validate()?;
    let TrueWarp::ConstantWeight(truth) = config.true_warp else {
        return Err(Error::Config("coverage needs a constant-weight true warp".into()));
    };
    let grid = config.grid()?;
    let nodes: Vec<usize> = omegas
        .iter()
        .map(|&w| {
            if (0.0..=1.0).contains(&w) {
                Ok((w * (grid.n_points() - 1) as f64).round() as usize)
            } else {
                Err(Error::Config(format!("location {w} outside [0, 1]")))
            }
        })
        .collect::<Result<_>>()?;
    let hits: Vec<Option<Vec<bool>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<bool>> {
            let dataset = generate_dataset(config, r)?;
            let fitted = fit_dataset(config, &dataset, r)?;
            let band = w_band(&fitted, &sandwich_variance(&fitted, &dataset.data)?, level)?;
            Ok(nodes.iter().map(|&j| band.covers(j, truth)).collect())
        })
        .map(|r| r.ok())
        .collect();
    let used: Vec<&Vec<bool>> = hits.iter().flatten().collect();
    let n_used = used.len();
    let coverage = (0..nodes.len())
        .map(|k| used.iter().filter(|h| h[k]).count() as f64 / n_used.max(1) as f64)
        .collect();
    Ok(CoverageResult {
        level,
        omegas: omegas.to_vec(),
        coverage,
        n_used,
        n_failed: config.replications - n_used,
    })
}

/// Empirical mean of tangent errors after transport to the uniform half density.
pub fn transported_mean_norm(errors: &[TangentVector]) -> Result<f64> {
    let Some(first) = errors.first() else {
        return Err(Error::Degenerate("no tangent errors".into()));
    };
    let grid = first.base().grid().clone();
    let base = HalfDensity::uniform(&grid);
    let mut mean = vec![0.0; grid.n_points()];
    for e in errors {
        let moved = crate::sphere_geometry::parallel_transport(e, &base)?;
        for (m, v) in mean.iter_mut().zip(moved.values()) {
            *m += v / errors.len() as f64;
        }
    }
    Ok(trapezoid_product(&mean, &mean).sqrt())
}
