//! Command-line interface.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure or
//! non-convergence, 4 invalid configuration.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use chrono::{DateTime, SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{default_lambda_grid, fit, fit_cross_validated, predict, FitConfig, WarpFit};
use crate::grid_density::{AffineParams, BandwidthRule, GridDensity, DEFAULT_GRID_POINTS};
use crate::inference::{beta_band, sandwich_variance, w_band, PointwiseCI, SandwichVariance};
use crate::io::{
    read_densities, read_json, read_pairs, write_columns, write_json, write_pairs, write_rows,
    PairsFormat, PairsInput,
};
use crate::simulation::{
    generate_dataset, run_replications, LambdaChoice, PredictorFamily, SimConfig, SimResult,
    TrueWarp,
};
use crate::sphere_geometry::{
    fisher_rao_distance, hellinger, kl_divergence, l2_distance, wasserstein_1d,
    DEFAULT_QUANTILE_LEVELS,
};
use crate::warping::{act, DEFAULT_N_BASIS, DEFAULT_ORDER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DENSEWARP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "densewarp", version, about = "Density-on-density regression through warping functions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the warp from paired densities or observations.
    Fit(FitArgs),
    /// Apply a fitted warp to new predictor densities.
    Predict(PredictArgs),
    /// Pointwise confidence bands for a fit.
    Infer(InferArgs),
    /// Run the simulation harness.
    Simulate(SimulateArgs),
    /// Distance between two density columns.
    Distance(DistanceArgs),
    /// Write plot-ready CSVs for a fit or a simulation result.
    PlotData(PlotDataArgs),
}

/// `auto` (cross-validation) or a fixed penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaArg {
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for LambdaArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(LambdaArg::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|l| *l >= 0.0 && l.is_finite())
            .map(LambdaArg::Fixed)
            .ok_or_else(|| format!("expected auto or a non-negative number, got {s}"))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Pairs CSV: long `unit_id,variable,value` or wide `omega,f_<unit>,g_<unit>,...`.
    #[arg(long)]
    pub input: PathBuf,
    /// Grid size for kernel estimates of long-format input.
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    /// Kernel bandwidth for long-format input: silverman, pooled or a number.
    #[arg(long, default_value = "silverman")]
    #[serde(serialize_with = "as_debug")]
    pub bandwidth: BandwidthRule,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizerArgs {
    /// Number of basis functions minus one.
    #[arg(long, default_value_t = DEFAULT_N_BASIS)]
    pub k: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

impl OptimizerArgs {
    fn config(&self, lambda: f64) -> FitConfig {
        FitConfig {
            n_basis: self.k,
            order: DEFAULT_ORDER,
            lambda,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            cv_folds: self.folds,
            lambda_grid: default_lambda_grid(),
        }
    }
}

fn as_debug<T: std::fmt::Debug, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:?}"))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Penalty weight, or `auto` for cross-validation.
    #[arg(long, default_value = "0.0001")]
    #[serde(serialize_with = "as_debug")]
    pub lambda: LambdaArg,
    /// Seed of the cross-validation fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write confidence bands to this CSV.
    #[arg(long)]
    pub ci: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Wide CSV of predictor densities.
    #[arg(long)]
    pub density: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Observations per density; 0 fits the true densities.
    #[arg(long, default_value_t = 0)]
    pub m: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    /// Half-width of the uniform noise multiplier.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Penalty weight, or `auto` for cross-validation in every replication.
    #[arg(long, default_value = "0.0001")]
    #[serde(serialize_with = "as_debug")]
    pub lambda: LambdaArg,
    /// Constant weight function of the true warp.
    #[arg(long, default_value_t = 1.5)]
    pub true_weight: f64,
    /// Relative jitter of the Beta(2, 5) predictor shapes.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Kernel bandwidth of the estimated arm: silverman, pooled or a number.
    #[arg(long, default_value = "pooled")]
    #[serde(serialize_with = "as_debug")]
    pub bandwidth: BandwidthRule,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the generated pairs, one wide CSV per replication.
    #[arg(long)]
    pub emit_pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Hellinger,
    FisherRao,
    Wasserstein,
    L2,
    Kl,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DistanceArgs {
    /// Wide CSV holding the first density.
    pub first: PathBuf,
    /// Wide CSV holding the second density.
    pub second: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Hellinger)]
    pub metric: Metric,
    /// Column of the first file (default: its first density column).
    #[arg(long)]
    pub column_a: Option<String>,
    /// Column of the second file (default: its first density column).
    #[arg(long)]
    pub column_b: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotDataArgs {
    #[arg(long, conflicts_with = "sim", required_unless_present = "sim")]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub sim: Option<PathBuf>,
    /// Pairs used for density overlays and bands (fit only).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    #[arg(long, default_value = "silverman")]
    #[serde(serialize_with = "as_debug")]
    pub bandwidth: BandwidthRule,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance written next to or inside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_echo: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

fn timestamp() -> String {
    DateTime::<Utc>::from(SystemTime::now()).to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    started_at: String,
}

impl Run {
    fn start<T: Serialize>(command: &'static str, args: &T, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(args)?,
            seed,
            started_at: timestamp(),
        })
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            config_echo: self.config.clone(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at.clone(),
            finished_at: timestamp(),
        }
    }

    /// Write the manifest beside a CSV output as `<out>.manifest.json`.
    fn sidecar(&self, out: &Path) -> Result<()> {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        write_json(Path::new(&name), &self.manifest())
    }
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub manifest: RunManifest,
    pub unit_ids: Vec<String>,
    pub input_format: PairsFormat,
    /// Map from [0, 1] back to the raw scale of long-format input, when rescaled.
    pub rescale: Option<AffineParams>,
    #[serde(flatten)]
    pub fit: WarpFit,
}

/// Contents of `simresult.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub manifest: RunManifest,
    pub config: SimConfig,
    #[serde(flatten)]
    pub result: SimResult,
}

/// Map a library error to an exit code.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_INPUT,
    }
}

/// Parse arguments from the process and run.
pub fn main_exit() -> i32 {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    run(cli.command)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure threads: {e}")))
}

/// Run one command and report errors on stderr.
pub fn run(command: Command) -> i32 {
    let outcome = match command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Predict(a) => cmd_predict(&a).map(|_| EXIT_OK),
        Command::Infer(a) => cmd_infer(&a).map(|_| EXIT_OK),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Distance(a) => cmd_distance(&a).map(|_| EXIT_OK),
        Command::PlotData(a) => cmd_plot_data(&a).map(|_| EXIT_OK),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("level {level} must lie in (0, 1)")))
    }
}

fn load_pairs(data: &DataArgs) -> Result<PairsInput> {
    read_pairs(&data.input, data.grid_points, data.bandwidth)
}

fn bands(fit: &WarpFit, input: &PairsInput, level: f64) -> Result<(SandwichVariance, PointwiseCI, PointwiseCI)> {
    let variance = sandwich_variance(fit, &input.data)?;
    if variance.hessian_floored {
        eprintln!("warning: Hessian eigenvalues were floored; bands may be unreliable");
    }
    let w = w_band(fit, &variance, level)?;
    let beta = beta_band(fit, &variance, level)?;
    Ok((variance, w, beta))
}

fn write_bands(path: &Path, w: &PointwiseCI, beta: &PointwiseCI) -> Result<()> {
    write_columns(
        path,
        &w.grid,
        &[
            ("w_hat".into(), &w.estimate),
            ("w_lo".into(), &w.lower),
            ("w_hi".into(), &w.upper),
            ("beta_hat".into(), &beta.estimate),
            ("beta_lo".into(), &beta.lower),
            ("beta_hi".into(), &beta.upper),
        ],
    )
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let run = Run::start("fit", args, Some(args.seed))?;
    if args.ci.is_some() {
        check_level(args.level)?;
    }
    let lambda = match args.lambda {
        LambdaArg::Fixed(l) => l,
        LambdaArg::Auto => FitConfig::default().lambda,
    };
    let config = args.optimizer.config(lambda);
    config.validate()?;
    let input = load_pairs(&args.data)?;
    let fitted = match args.lambda {
        LambdaArg::Auto => fit_cross_validated(&input.data, &config, args.seed)?,
        LambdaArg::Fixed(_) => fit(&input.data, &config)?,
    };
    let band = match &args.ci {
        Some(_) => Some(bands(&fitted, &input, args.level)?),
        None => None,
    };
    let converged = fitted.converged;
    let output = FitOutput {
        manifest: run.manifest(),
        unit_ids: input.unit_ids.clone(),
        input_format: input.format,
        rescale: input.rescale,
        fit: fitted,
    };
    write_json(&args.out, &output)?;
    if let (Some(path), Some((_, w, beta))) = (&args.ci, band) {
        write_bands(path, &w, &beta)?;
        run.sidecar(path)?;
    }
    if converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "warning: optimizer stopped after {} iterations with gradient norm {:.3e}",
            output.fit.iterations, output.fit.gradient_norm
        );
        Ok(EXIT_NUMERICAL)
    }
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let run = Run::start("predict", args, None)?;
    let saved: FitOutput = read_json(&args.fit)?;
    let densities = read_densities(&args.density)?;
    let predicted = densities
        .columns
        .iter()
        .map(|(name, f)| Ok((name.clone(), predict(f, &saved.fit)?)))
        .collect::<Result<Vec<(String, GridDensity)>>>()?;
    let columns: Vec<(String, &[f64])> = predicted
        .iter()
        .map(|(name, g)| (name.clone(), g.values()))
        .collect();
    write_columns(&args.out, &densities.grid, &columns)?;
    run.sidecar(&args.out)
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let run = Run::start("infer", args, None)?;
    check_level(args.level)?;
    let saved: FitOutput = read_json(&args.fit)?;
    let input = load_pairs(&args.data)?;
    let (_, w, beta) = bands(&saved.fit, &input, args.level)?;
    write_bands(&args.out, &w, &beta)?;
    run.sidecar(&args.out)
}

/// Simulation configuration described by the command-line arguments.
pub fn simulation_config(args: &SimulateArgs) -> SimConfig {
    let lambda = match args.lambda {
        LambdaArg::Auto => LambdaChoice::CrossValidate,
        LambdaArg::Fixed(l) => LambdaChoice::Fixed(l),
    };
    SimConfig {
        n: args.n,
        m1: args.m,
        m2: args.m,
        noise_halfwidth: args.noise,
        true_warp: TrueWarp::ConstantWeight(args.true_weight),
        predictor: PredictorFamily {
            jitter: args.jitter,
            ..PredictorFamily::default()
        },
        seed: args.seed,
        replications: args.reps,
        grid_points: args.grid_points,
        fit: args.optimizer.config(FitConfig::default().lambda),
        lambda,
        bandwidth: args.bandwidth,
    }
}

/// Unit labels used for emitted pairs.
pub fn unit_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{i:04}")).collect()
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let run = Run::start("simulate", args, Some(args.seed))?;
    let config = simulation_config(args);
    config.validate()?;
    if config.replications == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let result = run_replications(&config)?;
    if let Some(dir) = &args.emit_pairs {
        std::fs::create_dir_all(dir)?;
        let labels = unit_labels(config.n);
        for rep in 0..config.replications {
            let dataset = generate_dataset(&config, rep)?;
            write_pairs(&dir.join(format!("rep_{rep:04}.csv")), &labels, &dataset.data)?;
        }
        write_json(&dir.join("manifest.json"), &run.manifest())?;
    }
    let failed = result.n_failed;
    let output = SimOutput {
        manifest: run.manifest(),
        config,
        result,
    };
    write_json(&args.out, &output)?;
    if failed == output.config.replications {
        eprintln!("error: every replication failed");
        return Ok(EXIT_NUMERICAL);
    }
    if failed > 0 {
        eprintln!("warning: {failed} replications failed");
    }
    Ok(EXIT_OK)
}

fn pick_column(path: &Path, column: Option<&str>) -> Result<GridDensity> {
    let file = read_densities(path)?;
    match column {
        None => Ok(file.columns.into_iter().next().expect("at least one column").1),
        Some(name) => file
            .columns
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Input(format!("{}: no column `{name}`", path.display()))),
    }
}

/// Distance between two densities under a metric.
pub fn distance(metric: Metric, a: &GridDensity, b: &GridDensity) -> Result<f64> {
    match metric {
        Metric::Hellinger => hellinger(a, b),
        Metric::FisherRao => fisher_rao_distance(a, b),
        Metric::Wasserstein => wasserstein_1d(a, b, DEFAULT_QUANTILE_LEVELS),
        Metric::L2 => l2_distance(a, b),
        Metric::Kl => kl_divergence(a, b),
    }
}

/// Six significant digits; zero prints as `0.000000`.
pub fn format_significant(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.6}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn cmd_distance(args: &DistanceArgs) -> Result<()> {
    let a = pick_column(&args.first, args.column_a.as_deref())?;
    let b = pick_column(&args.second, args.column_b.as_deref())?;
    println!("{}", format_significant(distance(args.metric, &a, &b)?));
    Ok(())
}

pub fn cmd_plot_data(args: &PlotDataArgs) -> Result<()> {
    let run = Run::start("plot-data", args, None)?;
    std::fs::create_dir_all(&args.out)?;
    if let Some(path) = &args.sim {
        let saved: SimOutput = read_json(path)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows: Vec<Vec<String>> = saved
            .result
            .per_replication
            .iter()
            .map(|r| {
                vec![
                    r.replication.to_string(),
                    fmt(r.warp_distance),
                    fmt(r.mean_hellinger),
                    fmt(r.baseline_hellinger),
                    fmt(r.lambda_used),
                    r.converged.to_string(),
                    r.iterations.to_string(),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        write_rows(
            &args.out.join("replications.csv"),
            &[
                "replication",
                "warp_distance",
                "mean_hellinger",
                "baseline_hellinger",
                "lambda_used",
                "converged",
                "iterations",
                "error",
            ],
            &rows,
        )?;
        return write_json(&args.out.join("manifest.json"), &run.manifest());
    }

    let path = args.fit.as_ref().expect("clap requires --fit or --sim");
    let saved: FitOutput = read_json(path)?;
    let fitted = &saved.fit;
    let input = match &args.input {
        Some(p) => {
            check_level(args.level)?;
            Some(read_pairs(p, args.grid_points, args.bandwidth)?)
        }
        None => None,
    };
    let grid = fitted.beta_hat.grid().clone();
    let w_hat = fitted.coefficients.eval(&grid)?;
    let mut band = None;
    let mut overlays = Vec::new();
    if let Some(input) = &input {
        if input.data.n() >= 2 {
            let (_, w, beta) = bands(fitted, input, args.level)?;
            band = Some((w, beta));
        }
        for (id, (f, g)) in input.unit_ids.iter().zip(input.data.pairs()) {
            overlays.push((id.clone(), f.clone(), g.clone(), act(f, &fitted.beta_hat)?));
        }
    }

    write_columns(
        &args.out.join("warp.csv"),
        &grid,
        &[
            ("beta_hat".into(), fitted.beta_hat.beta_values()),
            ("beta_prime".into(), fitted.beta_hat.deriv_values()),
            ("identity".into(), grid.points()),
            ("w_hat".into(), &w_hat),
        ],
    )?;
    if let Some((w, beta)) = &band {
        write_bands(&args.out.join("band.csv"), w, beta)?;
    }
    if !overlays.is_empty() {
        let rows: Vec<Vec<String>> = overlays
            .iter()
            .flat_map(|(id, f, g, ghat)| {
                grid.points().iter().enumerate().map(move |(j, w)| {
                    vec![
                        id.clone(),
                        w.to_string(),
                        f.values()[j].to_string(),
                        g.values()[j].to_string(),
                        ghat.values()[j].to_string(),
                    ]
                })
            })
            .collect();
        write_rows(
            &args.out.join("densities.csv"),
            &["unit_id", "omega", "f", "g", "g_hat"],
            &rows,
        )?;
    }
    write_json(&args.out.join("manifest.json"), &run.manifest())
}
