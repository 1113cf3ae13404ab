//! Command-line workflows: `simulate`, `fit`, `metrics` and
//! `check-derivatives`.
//!
//! Exit status: 0 success, 1 usage, 2 validation, 3 numerical failure.
//! Worker threads default to the available parallelism and can be set with
//! the `FLEXJM_THREADS` environment variable.

pub mod formula;
pub mod io;

use crate::derivatives::{fd_check, DerivativeError, FdReport, FdTolerances};
use crate::mcmc::{run_chains, summarize, McmcError, PosteriorSamples, SamplerConfig, Tau2Method};
use crate::metrics::{aggregate, all_metrics, MetricsError};
use crate::mode::{fit_mode_state, ModeConfig, ModeError, SweepRecord};
use crate::model::{JointData, ModelError, ModelSpec, ModelState};
use crate::predict::{evaluation_points, normal_band_predictions, Prediction};
use crate::simulate::{assemble_dataset, SimError, SimSetting};
use clap::{Parser, Subcommand, ValueEnum};
use formula::{parse_formula, FormulaError};
use io::{io_err, IoError, Manifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const THREADS_ENV: &str = "FLEXJM_THREADS";

/// Worker threads: `FLEXJM_THREADS` if set to a positive integer, else the
/// available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FormulaError> for CliError {
    fn from(e: FormulaError) -> Self {
        CliError::Validation(format!("formula {e}"))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnknownSetting(_) | SimError::Invalid(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ModeError> for CliError {
    fn from(e: ModeError) -> Self {
        match e {
            ModeError::Model(m) => m.into(),
            ModeError::InvalidSteplength(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<McmcError> for CliError {
    fn from(e: McmcError) -> Self {
        match e {
            McmcError::Model(m) => m.into(),
            McmcError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DerivativeError> for CliError {
    fn from(e: DerivativeError) -> Self {
        match e {
            DerivativeError::Model(m) => m.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flexjm", version, about = "Flexible Bayesian additive joint models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset (longitudinal.csv, survival.csv, truth.csv).
    Simulate(SimulateArgs),
    /// Fit a joint model by posterior mode or posterior mean.
    Fit(FitArgs),
    /// Bias, MSE and coverage of fits against simulation truth.
    Metrics(MetricsArgs),
    /// Compare analytic derivatives with finite differences.
    CheckDerivatives(CheckArgs),
}

#[derive(Debug, clap::Args, Serialize)]
struct SimulateArgs {
    /// 1a, 1b, 2a, 2b, 1a-mini or 2a-mini.
    #[arg(long)]
    setting: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Replicate r (1-based) uses seed + r − 1 and is written to `rep<r>/`.
    #[arg(long, default_value_t = 1)]
    replicates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mode,
    Mean,
}

#[derive(Debug, clap::Args, Serialize)]
struct DataArgs {
    /// Directory holding longitudinal.csv and survival.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "surv")]
    long: Option<PathBuf>,
    #[arg(long, requires = "long")]
    surv: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Result<(PathBuf, PathBuf), CliError> {
        match (&self.data, &self.long, &self.surv) {
            (Some(d), None, None) => Ok((d.join("longitudinal.csv"), d.join("survival.csv"))),
            (None, Some(l), Some(s)) => Ok((l.clone(), s.clone())),
            _ => Err(CliError::Usage("give either --data DIR or both --long and --surv".into())),
        }
    }
}

#[derive(Debug, clap::Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    formula: PathBuf,
    #[arg(long, value_enum, default_value_t = Estimator::Mode)]
    estimator: Estimator,
    #[arg(long)]
    out: PathBuf,
    /// A previous fit.json to start the sampler from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 23000)]
    n_iter: usize,
    #[arg(long, default_value_t = 3000)]
    burn_in: usize,
    #[arg(long, default_value_t = 20)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_sweeps: usize,
    /// Quadrature nodes per subject.
    #[arg(long, default_value_t = 25)]
    quad: usize,
    /// Evaluation grid `lo:hi:step` for time-varying predictors. Defaults to
    /// the simulation grid recorded in the data manifest, else the distinct
    /// measurement times.
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Debug, clap::Args, Serialize)]
struct MetricsArgs {
    /// A fit directory, or a directory of replicate fit directories.
    #[arg(long)]
    fits: PathBuf,
    /// The matching dataset directory, or a directory of replicate datasets
    /// with the same names.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct CheckArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    formula: PathBuf,
    /// Directory for the report; defaults to `<data>/derivatives`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Random states checked in addition to the starting values.
    #[arg(long, default_value_t = 1)]
    states: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    quad: usize,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let args = &argv[1.min(argv.len())..];
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a, args),
        Command::Fit(a) => fit(&a, args),
        Command::Metrics(a) => metrics(&a, args),
        Command::CheckDerivatives(a) => check_derivatives(&a, args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

/// Simulates one dataset into `dir` with its truth table and manifest.
pub fn simulate_into(setting: &SimSetting, dir: &Path, args: &[String]) -> Result<(), CliError> {
    create_dir(dir)?;
    let sim = assemble_dataset(setting)?;
    let (l, s, t) = (dir.join("longitudinal.csv"), dir.join("survival.csv"), dir.join("truth.csv"));
    io::write_data(&sim.data, &l, &s)?;
    io::write_truth(&sim.truth_table(), &t)?;
    let mut m = Manifest::new("simulate", args, to_json(setting), Some(setting.seed));
    for p in [&l, &s, &t] {
        m.output(p)?;
    }
    m.write(dir)?;
    log::info!(
        "{}: n = {}, N = {}, events = {} -> {}",
        setting.name,
        sim.data.n(),
        sim.data.n_obs(),
        sim.data.events(),
        dir.display()
    );
    Ok(())
}

fn simulate(a: &SimulateArgs, args: &[String]) -> Result<(), CliError> {
    if a.replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    if a.replicates == 1 {
        return simulate_into(&SimSetting::preset(&a.setting, a.seed)?, &a.out, args);
    }
    let settings: Vec<SimSetting> = (0..a.replicates)
        .map(|r| SimSetting::preset(&a.setting, a.seed.wrapping_add(r as u64)))
        .collect::<Result<_, _>>()?;
    let threads = thread_count();
    let width = a.replicates.to_string().len().max(3);
    let jobs: Vec<(usize, &SimSetting)> = settings.iter().enumerate().collect();
    for chunk in jobs.chunks(threads) {
        let results: Vec<Result<(), CliError>> = std::thread::scope(|sc| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(r, st)| {
                    let dir = a.out.join(format!("rep{:0width$}", r + 1));
                    sc.spawn(move || simulate_into(st, &dir, args))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Numerical("simulation thread panicked".into()))))
                .collect()
        });
        results.into_iter().collect::<Result<Vec<_>, _>>()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub label: String,
    pub predictor: String,
    pub tau2: Vec<f64>,
    pub edf: Option<f64>,
    pub acceptance: Option<f64>,
    pub coefficients: Vec<CoefSummary>,
}

/// The JSON summary written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub estimator: Estimator,
    pub converged: Option<bool>,
    pub sweeps: Option<usize>,
    pub kept_draws: Option<usize>,
    pub logpost: f64,
    pub blocks: Vec<BlockSummary>,
    /// Per block `(β, τ²)`: the mode, or the posterior means.
    pub parameters: Vec<(Vec<f64>, Vec<f64>)>,
    pub predictions: Vec<Prediction>,
}

/// `lo:hi:step` → grid points.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("--grid expects lo:hi:step, got `{text}`"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [lo, hi, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|j| lo + step * j as f64).collect())
}

fn default_grid(data: &JointData, data_dir: Option<&Path>) -> Vec<f64> {
    if let Some(dir) = data_dir {
        if let Ok(m) = io::read_json::<Manifest>(&dir.join("manifest.json")) {
            if let Ok(setting) = serde_json::from_value::<SimSetting>(m.config) {
                return setting.grid;
            }
        }
    }
    let mut times: Vec<f64> = data.records().iter().map(|r| r.time).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();
    times
}

#[derive(Debug, Serialize)]
struct ModeTraceRow {
    stage: String,
    sweep: usize,
    logpost: f64,
    tau2_changed: bool,
    steplengths: String,
    stalled: usize,
}

fn mode_trace(trace: &[SweepRecord]) -> Vec<ModeTraceRow> {
    trace
        .iter()
        .map(|r| ModeTraceRow {
            stage: format!("{:?}", r.stage).to_lowercase(),
            sweep: r.sweep,
            logpost: r.logpost,
            tau2_changed: r.tau2_changed,
            steplengths: r.steplengths.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            stalled: r.stalled.iter().filter(|&&s| s).count(),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct PredictionRow<'a> {
    predictor: &'a str,
    set: &'a str,
    id: &'a str,
    time: f64,
    estimate: f64,
    lower: f64,
    upper: f64,
}

fn write_prediction_csv(preds: &[Prediction], path: &Path) -> Result<(), CliError> {
    let rows: Vec<PredictionRow> = preds
        .iter()
        .map(|p| PredictionRow {
            predictor: p.predictor.name(),
            set: p.set.name(),
            id: &p.id,
            time: p.time,
            estimate: p.estimate,
            lower: p.lower,
            upper: p.upper,
        })
        .collect();
    io::write_rows(&rows, path)?;
    Ok(())
}

/// Posterior-mode fit summary.
pub fn mode_summary(state: ModelState, config: &ModeConfig, grid: &[f64]) -> Result<(FitSummary, Vec<SweepRecord>), CliError> {
    let fit = fit_mode_state(state, config)?;
    let points = evaluation_points(fit.state.data(), grid);
    let predictions = normal_band_predictions(&fit.state, &fit.covariances, &points)?;
    let blocks = fit
        .state
        .blocks()
        .iter()
        .enumerate()
        .map(|(b, blk)| BlockSummary {
            label: blk.label(),
            predictor: blk.predictor().name().into(),
            tau2: blk.tau2.clone(),
            edf: Some(fit.edf[b]),
            acceptance: None,
            coefficients: fit
                .intervals(b)
                .into_iter()
                .map(|(estimate, lower, upper)| CoefSummary { estimate, lower, upper })
                .collect(),
        })
        .collect();
    let summary = FitSummary {
        estimator: Estimator::Mode,
        converged: Some(fit.converged),
        sweeps: Some(fit.sweeps),
        kept_draws: None,
        logpost: fit.logpost(),
        blocks,
        parameters: fit.state.parameters(),
        predictions,
    };
    Ok((summary, fit.trace))
}

/// Posterior-mean fit summary from the chains started at `state`.
pub fn mean_summary(
    state: &ModelState,
    config: &SamplerConfig,
    grid: &[f64],
    threads: usize,
) -> Result<(FitSummary, PosteriorSamples), CliError> {
    let samples = run_chains(state, config, threads)?;
    let points = evaluation_points(state.data(), grid);
    let summary = summarize(&samples, state, &points)?;
    let mean_beta = samples.mean_beta();
    let s_count = samples.len().max(1) as f64;
    let mut parameters = Vec::new();
    let mut blocks = Vec::new();
    for (b, blk) in state.blocks().iter().enumerate() {
        let tau2: Vec<f64> = (0..blk.tau2.len())
            .map(|j| samples.tau2.iter().map(|d| d[b][j]).sum::<f64>() / s_count)
            .collect();
        let coefficients = (0..blk.n_coef())
            .map(|j| {
                let draws = samples.coefficient(b, j);
                CoefSummary {
                    estimate: mean_beta[b][j],
                    lower: crate::mcmc::draw_quantile(&draws, 0.025),
                    upper: crate::mcmc::draw_quantile(&draws, 0.975),
                }
            })
            .collect();
        blocks.push(BlockSummary {
            label: blk.label(),
            predictor: blk.predictor().name().into(),
            tau2: tau2.clone(),
            edf: None,
            acceptance: samples.acceptance.get(b).copied(),
            coefficients,
        });
        parameters.push((mean_beta[b].clone(), tau2));
    }
    let logpost = samples
        .logpost
        .iter()
        .flat_map(|c| c.last())
        .copied()
        .sum::<f64>()
        / samples.logpost.len().max(1) as f64;
    Ok((
        FitSummary {
            estimator: Estimator::Mean,
            converged: None,
            sweeps: None,
            kept_draws: Some(samples.len()),
            logpost,
            blocks,
            parameters,
            predictions: summary.predictions,
        },
        samples,
    ))
}

fn load_model(data: &DataArgs, formula: &Path, quad: usize, m: &mut Manifest) -> Result<(ModelSpec, JointData), CliError> {
    if quad < 2 {
        return Err(CliError::Usage("--quad must be at least 2".into()));
    }
    let (l, s) = data.paths()?;
    let text = fs::read_to_string(formula).map_err(io_err(formula))?;
    let spec = parse_formula(&text)?;
    let joint = io::load_data(&l, &s)?;
    for p in [&l, &s, &formula.to_path_buf()] {
        m.input(p)?;
    }
    Ok((spec, joint))
}

fn fit(a: &FitArgs, args: &[String]) -> Result<(), CliError> {
    let mut m = Manifest::new("fit", args, to_json(a), Some(a.seed));
    let (spec, data) = load_model(&a.data, &a.formula, a.quad, &mut m)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(&data, a.data.data.as_deref()),
    };
    let mut state = ModelState::new(&spec, data, a.quad)?;
    create_dir(&a.out)?;
    let (fit_path, trace_path, pred_path) = (a.out.join("fit.json"), a.out.join("trace.csv"), a.out.join("predictions.csv"));
    let summary = match a.estimator {
        Estimator::Mode => {
            if a.init.is_some() {
                return Err(CliError::Usage("--init applies to --estimator mean".into()));
            }
            let config = ModeConfig {
                tol: a.tol,
                max_sweeps: a.max_sweeps,
                ..ModeConfig::default()
            };
            let (summary, trace) = mode_summary(state, &config, &grid)?;
            io::write_rows(&mode_trace(&trace), &trace_path)?;
            summary
        }
        Estimator::Mean => {
            if let Some(init) = &a.init {
                let prev: FitSummary = io::read_json(init)?;
                state.set_parameters(&prev.parameters).map_err(|e| {
                    CliError::Validation(format!("{}: does not match the model: {e}", init.display()))
                })?;
                m.input(init)?;
            }
            let config = SamplerConfig {
                n_iter: a.n_iter,
                burn_in: a.burn_in,
                thin: a.thin,
                seed: a.seed,
                chains: a.chains,
                tau2_method: Tau2Method::Auto,
                ..SamplerConfig::default()
            };
            let (summary, samples) = mean_summary(&state, &config, &grid, thread_count())?;
            io::write_rows(&crate::mcmc::trace_rows(&samples), &trace_path)?;
            summary
        }
    };
    io::write_json(&summary, &fit_path)?;
    write_prediction_csv(&summary.predictions, &pred_path)?;
    for p in [&fit_path, &trace_path, &pred_path] {
        m.output(p)?;
    }
    m.write(&a.out)?;
    log::info!("fit written to {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics

/// `(name, fit.json)` pairs: the directory itself, or its subdirectories
/// holding a fit.json, sorted by name.
fn fit_dirs(dir: &Path) -> Result<Vec<(Option<String>, PathBuf)>, CliError> {
    let own = dir.join("fit.json");
    if own.is_file() {
        return Ok(vec![(None, own)]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let f = entry.path().join("fit.json");
        if f.is_file() {
            out.push((Some(entry.file_name().to_string_lossy().into_owned()), f));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Validation(format!("no fit.json under {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    predictor: String,
    set: String,
    scope: String,
    time: Option<f64>,
    bias: f64,
    mse: f64,
    coverage: f64,
    count: usize,
    replicates: usize,
}

fn metrics(a: &MetricsArgs, args: &[String]) -> Result<(), CliError> {
    let mut m = Manifest::new("metrics", args, to_json(a), None);
    let mut reports = Vec::new();
    for (name, fit_path) in fit_dirs(&a.fits)? {
        let truth_path = match &name {
            Some(n) => a.truth.join(n).join("truth.csv"),
            None => a.truth.join("truth.csv"),
        };
        let fit: FitSummary = io::read_json(&fit_path)?;
        let truth = io::read_truth(&truth_path)?;
        m.input(&fit_path)?;
        m.input(&truth_path)?;
        reports.push(all_metrics(&fit.predictions, &truth).map_err(|e| {
            CliError::Validation(format!("{} vs {}: {e}", fit_path.display(), truth_path.display()))
        })?);
    }
    let report = aggregate(&reports)?;
    let rows: Vec<ReportRow> = report
        .cells
        .iter()
        .map(|c| ReportRow {
            predictor: c.predictor.name().into(),
            set: c.set.name().into(),
            scope: if c.time.is_some() { "time" } else { "overall" }.into(),
            time: c.time,
            bias: c.bias,
            mse: c.mse,
            coverage: c.coverage,
            count: c.count,
            replicates: report.replicates,
        })
        .collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    io::write_rows(&rows, &a.out)?;
    m.output(&a.out)?;
    let mpath = a.out.with_extension("manifest.json");
    io::write_json(&m, &mpath)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// check-derivatives

struct CheckRow {
    state: usize,
    report: FdReport,
}

#[derive(Debug, Serialize)]
struct CheckCsvRow<'a> {
    state: usize,
    block: &'a str,
    score_error: f64,
    hessian_error: f64,
    asymmetry: f64,
    pass: bool,
}

/// Perturbs every block: coefficients by U(−0.1, 0.1), variances drawn
/// from U(0.5, 5).
pub fn perturb_state<R: Rng>(state: &mut ModelState, rng: &mut R) -> Result<(), ModelError> {
    for b in 0..state.n_blocks() {
        let beta: Vec<f64> = state.block(b).beta.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let tau2: Vec<f64> = state.block(b).tau2.iter().map(|_| rng.random_range(0.5..5.0)).collect();
        state.set_tau2(b, &tau2)?;
        state.set_beta(b, &beta)?;
    }
    Ok(())
}

fn check_derivatives(a: &CheckArgs, args: &[String]) -> Result<(), CliError> {
    let mut m = Manifest::new("check-derivatives", args, to_json(a), Some(a.seed));
    let (spec, data) = load_model(&a.data, &a.formula, a.quad, &mut m)?;
    let base = ModelState::new(&spec, data, a.quad)?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let mut rows = Vec::new();
    for k in 0..=a.states {
        let mut state = base.clone();
        if k > 0 {
            perturb_state(&mut state, &mut rng)?;
        }
        for report in fd_check(&state, a.eps, FdTolerances::default())? {
            rows.push(CheckRow { state: k, report });
        }
    }
    let out = match (&a.out, &a.data.data) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => d.join("derivatives"),
        (None, None) => PathBuf::from("derivatives"),
    };
    create_dir(&out)?;
    let path = out.join("derivatives.csv");
    let csv_rows: Vec<CheckCsvRow> = rows
        .iter()
        .map(|r| CheckCsvRow {
            state: r.state,
            block: &r.report.label,
            score_error: r.report.score_error,
            hessian_error: r.report.hessian_error,
            asymmetry: r.report.asymmetry,
            pass: r.report.passed(),
        })
        .collect();
    io::write_rows(&csv_rows, &path)?;
    m.output(&path)?;
    m.write(&out)?;
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.report.passed())
        .map(|r| format!("{} (state {})", r.report.label, r.state))
        .collect();
    for r in &rows {
        println!(
            "{:>2} {:<24} score {:.3e} hessian {:.3e} {}",
            r.state,
            r.report.label,
            r.report.score_error,
            r.report.hessian_error,
            if r.report.passed() { "pass" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("derivative check failed for {}", failed.join(", "))))
    }
}
