//! Command-line interface: experiment drivers with JSON configuration,
//! reproducible seeding, and a run manifest per invocation.
//!
//! Every run reads one JSON configuration file, writes its artifacts into
//! the output directory, and finishes with a `manifest.json` recording the
//! command, the full configuration, the effective seed, and the outputs.
//! Passing a previous `manifest.json` as `--config` reproduces the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibrate::{calibrate_dataset, MarketDataset};
use crate::continuum::{
    covariance_closed_form, covariance_moment_ode, integrate_coefficients,
    price_coefficients, simulate_price, simulate_price_with, CoefficientTable,
    MeanRevertingSupply, PriceScenario,
};
use crate::error::{Error, Result};
use crate::io;
use crate::market::{lq_cost, MarketParams};
use crate::supply::{
    binomial_path_increments, build_lattice, noise_rng, FourierSeries, NoiseKind, SupplyConfig,
};
use crate::tree::{brute_force_oracle, mean_l2_distance, solve_lq, TreeProblem};

/// Market-clearing prices for a commodity with stochastic supply:
/// finite-player games on binomial noise lattices and their mean-field limit.
#[derive(Debug, Parser)]
#[command(name = "priceform", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Available experiment drivers.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the value-function coefficients and simulate price scenarios
    /// in the continuum (mean-field) model.
    Continuum(RunArgs),
    /// Solve the finite-player game on the binomial supply lattice.
    Nplayer(RunArgs),
    /// Compare finite-player prices against the continuum limit over a range
    /// of player counts.
    Convergence(RunArgs),
    /// Calibrate supply and cost parameters to hourly market data.
    Calibrate(RunArgs),
    /// Tabulate the supply-price covariance: closed form, moment ODE, and
    /// Monte Carlo.
    Covariance(RunArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON configuration file (a previous run's manifest.json also works).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Format of tabular artifacts.
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

/// Tabular output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    /// Comma-separated values with a header row.
    Csv,
    /// An array of one JSON object per row.
    Json,
}

impl OutputFormat {
    fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical/solver failures, 4 for I/O failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter(_) | Error::InvalidData(_) | Error::ShapeMismatch(_)
        | Error::Json(_) => 2,
        Error::NonFinite(_)
        | Error::ZeroVolatility { .. }
        | Error::CapacityExceeded(_)
        | Error::SingularCoefficient { .. }
        | Error::CoefficientBlowUp { .. }
        | Error::ClosedFormDomain(_)
        | Error::NoConvergence { .. }
        | Error::Estimation(_)
        | Error::RankDeficient(_) => 3,
        Error::Io(_) | Error::Csv(_) => 4,
    }
}

fn default_ode_steps() -> usize {
    1000
}
fn default_scenarios() -> usize {
    100
}
fn default_x0_sd() -> f64 {
    0.1
}
fn default_n_harmonics() -> usize {
    4
}
fn default_mc_paths() -> usize {
    100_000
}
fn default_mc_steps() -> usize {
    1000
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    1000
}

/// Configuration of the `continuum` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuumConfig {
    pub params: MarketParams,
    /// Supply reversion target over the horizon.
    pub q_bar: FourierSeries,
    /// Supply volatility.
    pub sigma_s: f64,
    /// Mean initial reserves.
    pub mu0: f64,
    /// Initial supply rate.
    pub q0: f64,
    /// Number of Euler steps per scenario.
    pub m_steps: usize,
    /// Number of simulated scenarios (ignored when `enumerate` is set).
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    /// Enumerate all binomial paths up to step `m_steps - 1` instead of
    /// sampling.
    #[serde(default)]
    pub enumerate: bool,
    /// Noise distribution for sampled scenarios.
    #[serde(default = "default_noise")]
    pub noise: NoiseKind,
    /// Steps of the backward coefficient integration.
    #[serde(default = "default_ode_steps")]
    pub ode_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> NoiseKind {
    NoiseKind::Gaussian
}

/// Initial reserves of the finite-player game: either explicit values or an
/// i.i.d. normal draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum X0Spec {
    /// Explicit per-agent values.
    Explicit(Vec<f64>),
    /// `n` i.i.d. draws from `Normal(mean, sd^2)` using the run seed.
    Draw { n: usize, mean: f64, sd: f64 },
}

/// Configuration of the `nplayer` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NplayerConfig {
    pub params: MarketParams,
    pub supply: SupplyConfig,
    /// Initial supply rate at the lattice root.
    pub q0: f64,
    /// Lattice depth.
    pub m_steps: usize,
    pub x0: X0Spec,
    /// Cross-check the solution against the dense reference solver (only
    /// possible within its capacity).
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Configuration of the `convergence` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub params: MarketParams,
    pub q_bar: FourierSeries,
    pub sigma_s: f64,
    pub q0: f64,
    pub mu0: f64,
    pub m_steps: usize,
    /// Player counts to compare.
    pub n_agents: Vec<usize>,
    /// Standard deviation of the initial-reserve draws.
    #[serde(default = "default_x0_sd")]
    pub x0_sd: f64,
    #[serde(default = "default_ode_steps")]
    pub ode_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Configuration of the `calibrate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateConfig {
    /// CSV file with columns `date,hour,demand,price`.
    pub data: PathBuf,
    #[serde(default = "default_n_harmonics")]
    pub n_harmonics: usize,
    /// Mean initial reserves, needed to pin the cost targets.
    pub mu0: f64,
}

/// Configuration of the `covariance` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceConfig {
    pub params: MarketParams,
    pub sigma_s: f64,
    /// Evaluation times (defaults to quarter points of the horizon).
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default = "default_mc_paths")]
    pub mc_paths: usize,
    #[serde(default = "default_mc_steps")]
    pub mc_steps: usize,
    #[serde(default = "default_ode_steps")]
    pub ode_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Configuration of the projected-gradient fallback (reserved for custom
/// costs driven through the library API).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

/// Reads a configuration file; a manifest produced by a previous run is
/// unwrapped transparently. An explicit seed override is applied before
/// deserialization.
fn load_config<T: serde::de::DeserializeOwned>(
    path: &Path,
    seed_override: Option<u64>,
) -> Result<(T, Value)> {
    let text = std::fs::read_to_string(path)?;
    let mut value: Value = serde_json::from_str(&text)?;
    if let Some(inner) = value.get("config") {
        if value.get("command").is_some() {
            value = inner.clone();
        }
    }
    if let Some(seed) = seed_override {
        value["seed"] = json!(seed);
    }
    let config: T = serde_json::from_value(value.clone())?;
    Ok((config, value))
}

/// A tabular artifact rendered as CSV or a JSON array of row objects.
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn write(&self, dir: &Path, name: &str, format: OutputFormat) -> Result<PathBuf> {
        let cell_to_string = |v: &Value| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        match format {
            OutputFormat::Csv => {
                let path = dir.join(format!("{name}.csv"));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(cell_to_string))?;
                }
                w.flush()?;
                Ok(path)
            }
            OutputFormat::Json => {
                let path = dir.join(format!("{name}.json"));
                let objects: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let mut obj = serde_json::Map::new();
                        for (c, v) in self.columns.iter().zip(row) {
                            obj.insert(c.clone(), v.clone());
                        }
                        Value::Object(obj)
                    })
                    .collect();
                let file = std::fs::File::create(&path)?;
                io::write_json(&objects, file)?;
                Ok(path)
            }
        }
    }
}

fn num(v: f64) -> Value {
    // Non-finite values have no JSON number representation; stringify them.
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .unwrap_or_else(|| Value::String(v.to_string()))
}

/// Manifest written at the end of every successful run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Crate version that produced the run.
    pub version: String,
    /// Full effective configuration (seed override applied).
    pub config: Value,
    /// Effective seed.
    pub seed: u64,
    /// Tabular output format.
    pub format: String,
    /// Input files consumed.
    pub inputs: Vec<String>,
    /// Artifacts written (relative to the output directory).
    pub outputs: Vec<String>,
    /// Wall-clock duration of the run in milliseconds.
    pub duration_ms: u128,
}

/// Executes a parsed command line. Returns the manifest on success.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let started = Instant::now();
    let (name, args) = match &cli.command {
        Command::Continuum(a) => ("continuum", a),
        Command::Nplayer(a) => ("nplayer", a),
        Command::Convergence(a) => ("convergence", a),
        Command::Calibrate(a) => ("calibrate", a),
        Command::Covariance(a) => ("covariance", a),
    };
    std::fs::create_dir_all(&args.out)?;
    let (config_value, seed, inputs, outputs) = match &cli.command {
        Command::Continuum(a) => cmd_continuum(a)?,
        Command::Nplayer(a) => cmd_nplayer(a)?,
        Command::Convergence(a) => cmd_convergence(a)?,
        Command::Calibrate(a) => cmd_calibrate(a)?,
        Command::Covariance(a) => cmd_covariance(a)?,
    };
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_value,
        seed,
        format: args.format.as_str().to_string(),
        inputs,
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.to_string_lossy().into_owned())
            })
            .collect(),
        duration_ms: started.elapsed().as_millis(),
    };
    let file = std::fs::File::create(args.out.join("manifest.json"))?;
    io::write_json(&manifest, file)?;
    Ok(manifest)
}

type CommandOutput = (Value, u64, Vec<String>, Vec<PathBuf>);

fn supply_from(q_bar: &FourierSeries, sigma_s: f64) -> Result<MeanRevertingSupply> {
    let series = q_bar.clone();
    MeanRevertingSupply::new(move |t| series.eval(t), sigma_s)
}

fn cmd_continuum(args: &RunArgs) -> Result<CommandOutput> {
    let (cfg, value): (ContinuumConfig, Value) = load_config(&args.config, args.seed)?;
    cfg.params.validate()?;
    if cfg.m_steps == 0 {
        return Err(Error::InvalidParameter("m_steps must be >= 1".into()));
    }
    let supply = supply_from(&cfg.q_bar, cfg.sigma_s)?;
    let table = integrate_coefficients(&cfg.params, &supply, cfg.ode_steps)?;
    let mut outputs = Vec::new();

    let mut coeff_table = Table::new(
        &io::coefficient_header()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    for (t, values) in table.grid.iter().zip(&table.values) {
        let mut row = vec![num(*t)];
        row.extend(values.iter().map(|v| num(*v)));
        coeff_table.push(row);
    }
    outputs.push(coeff_table.write(&args.out, "coefficients", args.format)?);

    let h = cfg.params.t_horizon / cfg.m_steps as f64;
    let scenarios: Vec<PriceScenario> = if cfg.enumerate {
        if cfg.m_steps < 2 || cfg.m_steps > crate::supply::MAX_LATTICE_STEPS {
            return Err(Error::CapacityExceeded(format!(
                "enumeration requires 2 <= m_steps <= {}",
                crate::supply::MAX_LATTICE_STEPS
            )));
        }
        let leaves = 1usize << (cfg.m_steps - 1);
        (0..leaves)
            .map(|leaf| {
                let incs = binomial_path_increments(h, cfg.m_steps - 1, leaf);
                simulate_price_with(&cfg.params, &table, &supply, cfg.mu0, cfg.q0, h, &incs)
            })
            .collect::<Result<_>>()?
    } else {
        (0..cfg.scenarios)
            .map(|s| {
                simulate_price(
                    &cfg.params,
                    &table,
                    &supply,
                    cfg.mu0,
                    cfg.q0,
                    cfg.m_steps,
                    cfg.seed,
                    s as u64,
                    cfg.noise,
                )
            })
            .collect::<Result<_>>()?
    };

    let mut scen_table = Table::new(&["scenario", "t", "Xbar", "Q", "price"]);
    for (s, scenario) in scenarios.iter().enumerate() {
        for k in 0..scenario.grid.len() {
            scen_table.push(vec![
                json!(s),
                num(scenario.grid[k]),
                num(scenario.xbar[k]),
                num(scenario.q[k]),
                num(scenario.price[k]),
            ]);
        }
    }
    outputs.push(scen_table.write(&args.out, "scenarios", args.format)?);

    let n = scenarios.len() as f64;
    let mut stats = Table::new(&["t", "mean", "sd"]);
    for k in 0..scenarios[0].grid.len() {
        let mean = scenarios.iter().map(|s| s.price[k]).sum::<f64>() / n;
        let var = scenarios
            .iter()
            .map(|s| (s.price[k] - mean) * (s.price[k] - mean))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        stats.push(vec![
            num(scenarios[0].grid[k]),
            num(mean),
            num(var.sqrt()),
        ]);
    }
    outputs.push(stats.write(&args.out, "stats", args.format)?);
    Ok((value, cfg.seed, Vec::new(), outputs))
}

fn draw_x0(spec: &X0Spec, seed: u64) -> Result<Vec<f64>> {
    match spec {
        X0Spec::Explicit(values) => {
            if values.is_empty() {
                return Err(Error::InvalidParameter("x0 must not be empty".into()));
            }
            Ok(values.clone())
        }
        X0Spec::Draw { n, mean, sd } => {
            if *n == 0 {
                return Err(Error::InvalidParameter("x0 draw needs n >= 1".into()));
            }
            if !(*sd >= 0.0) {
                return Err(Error::InvalidParameter("x0 sd must be >= 0".into()));
            }
            let mut rng = noise_rng(seed, u64::MAX - 1);
            Ok((0..*n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + sd * z
                })
                .collect())
        }
    }
}

fn cmd_nplayer(args: &RunArgs) -> Result<CommandOutput> {
    let (cfg, value): (NplayerConfig, Value) = load_config(&args.config, args.seed)?;
    cfg.params.validate()?;
    let model = cfg.supply.build()?;
    let lattice = build_lattice(&model, cfg.q0, cfg.m_steps, cfg.params.t_horizon)?;
    let x0 = draw_x0(&cfg.x0, cfg.seed)?;
    let problem = TreeProblem {
        cost: lq_cost(&cfg.params),
        params: cfg.params,
        lattice,
        x0,
    };
    let solution = solve_lq(&problem)?;

    let mut outputs = Vec::new();
    let json_path = args.out.join("solution.json");
    io::write_json(&solution, std::fs::File::create(&json_path)?)?;
    outputs.push(json_path);

    let mut columns: Vec<String> = ["k", "j", "t", "Q", "price"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    columns.extend((0..problem.n_agents()).map(|i| format!("v_{i}")));
    let mut table = Table::new(&columns.iter().map(String::as_str).collect::<Vec<_>>());
    for (k, level) in solution.price.iter().enumerate() {
        for (j, &price) in level.iter().enumerate() {
            let mut row = vec![
                json!(k),
                json!(j),
                num(problem.lattice.time(k)),
                num(problem.lattice.levels[k][j]),
                num(price),
            ];
            row.extend((0..problem.n_agents()).map(|i| num(solution.v[i][k][j])));
            table.push(row);
        }
    }
    outputs.push(table.write(&args.out, "prices", args.format)?);

    let mut diagnostics = json!({
        "n_agents": problem.n_agents(),
        "m_steps": problem.lattice.m_steps,
        "variables": problem.variable_count(),
        "objective": solution.objective,
        "kkt_residual": solution.kkt_residual,
    });
    if cfg.oracle {
        let reference = brute_force_oracle(&problem)?;
        let mut max_diff = 0.0f64;
        for (a, b) in solution.price.iter().zip(&reference.price) {
            for (x, y) in a.iter().zip(b) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        diagnostics["oracle_max_price_diff"] = num(max_diff);
    }
    let diag_path = args.out.join("diagnostics.json");
    io::write_json(&diagnostics, std::fs::File::create(&diag_path)?)?;
    outputs.push(diag_path);
    Ok((value, cfg.seed, Vec::new(), outputs))
}

/// One row of the convergence experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    /// Number of players.
    pub n_agents: usize,
    /// Distance of the drawn mean initial reserve from `mu0`.
    pub xbar0_abs_error: f64,
    /// Ensemble-mean discrete L2 distance between finite-player and
    /// continuum price paths over the shared binomial paths.
    pub mean_l2: f64,
    /// Unknowns of the finite-player program.
    pub variables: usize,
}

/// Runs the finite-player versus continuum comparison for each player count:
/// draw initial reserves, solve the lattice game, simulate the continuum
/// price along every binomial path, and average the pathwise L2 distance.
pub fn convergence_experiment(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    cfg.params.validate()?;
    let supply = supply_from(&cfg.q_bar, cfg.sigma_s)?;
    let table = integrate_coefficients(&cfg.params, &supply, cfg.ode_steps)?;
    let model = supply.to_linear();
    let lattice = build_lattice(&model, cfg.q0, cfg.m_steps, cfg.params.t_horizon)?;
    let h = lattice.h;
    let m = cfg.m_steps;

    // Continuum prices along every binomial path, shared across player
    // counts (they do not depend on N).
    let leaves = 1usize << (m - 1);
    let mut continuum_paths = Vec::with_capacity(leaves);
    for leaf in 0..leaves {
        let incs = binomial_path_increments(h, m - 1, leaf);
        let scenario =
            simulate_price_with(&cfg.params, &table, &supply, cfg.mu0, cfg.q0, h, &incs)?;
        continuum_paths.push(scenario.price);
    }

    let mut rows = Vec::with_capacity(cfg.n_agents.len());
    for &n in &cfg.n_agents {
        if n == 0 {
            return Err(Error::InvalidParameter("player counts must be >= 1".into()));
        }
        let mut rng = noise_rng(cfg.seed, 2_000_000 + n as u64);
        let x0: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                cfg.mu0 + cfg.x0_sd * z
            })
            .collect();
        let problem = TreeProblem {
            cost: lq_cost(&cfg.params),
            params: cfg.params,
            lattice: lattice.clone(),
            x0,
        };
        let solution = solve_lq(&problem)?;
        let tree_paths = solution.price_paths();
        let mean_l2 = mean_l2_distance(&tree_paths, &continuum_paths, h)?;
        let xbar0 = problem.x0.iter().sum::<f64>() / n as f64;
        rows.push(ConvergenceRow {
            n_agents: n,
            xbar0_abs_error: (xbar0 - cfg.mu0).abs(),
            mean_l2,
            variables: problem.variable_count(),
        });
    }
    Ok(rows)
}

fn cmd_convergence(args: &RunArgs) -> Result<CommandOutput> {
    let (cfg, value): (ConvergenceConfig, Value) = load_config(&args.config, args.seed)?;
    if cfg.m_steps < 2 {
        return Err(Error::InvalidParameter(
            "the convergence experiment needs m_steps >= 2".into(),
        ));
    }
    let rows = convergence_experiment(&cfg)?;
    let mut table = Table::new(&["n_agents", "xbar0_abs_error", "mean_l2", "variables"]);
    for row in &rows {
        table.push(vec![
            json!(row.n_agents),
            num(row.xbar0_abs_error),
            num(row.mean_l2),
            json!(row.variables),
        ]);
    }
    let out = table.write(&args.out, "convergence", args.format)?;
    Ok((value, cfg.seed, Vec::new(), vec![out]))
}

fn cmd_calibrate(args: &RunArgs) -> Result<CommandOutput> {
    let (cfg, value): (CalibrateConfig, Value) = load_config(&args.config, args.seed)?;
    let dataset = MarketDataset::from_csv_path(&cfg.data)?;
    let report = calibrate_dataset(&dataset, cfg.n_harmonics, cfg.mu0)?;

    let mut outputs = Vec::new();
    let report_path = args.out.join("calibration.json");
    io::write_json(&report, std::fs::File::create(&report_path)?)?;
    outputs.push(report_path);

    // Observed versus fitted daily profiles.
    let (supply, price, _) = dataset.normalized()?;
    let grid = dataset.day_grid();
    let n_days = dataset.n_days() as f64;
    let mut table = Table::new(&["t", "mean_supply", "q_osc", "mean_price", "price_fit"]);
    for (hh, &t) in grid.iter().enumerate() {
        let mean_supply = supply.iter().map(|d| d[hh]).sum::<f64>() / n_days;
        let mean_price = price.iter().map(|d| d[hh]).sum::<f64>() / n_days;
        let q_fn = |s: f64| report.q_osc.eval(s);
        let fitted = report.cost.fitted_price(&q_fn, 1.0, t);
        table.push(vec![
            num(t),
            num(mean_supply),
            num(report.q_osc.eval(t)),
            num(mean_price),
            num(fitted),
        ]);
    }
    outputs.push(table.write(&args.out, "profiles", args.format)?);
    Ok((
        value,
        0,
        vec![cfg.data.to_string_lossy().into_owned()],
        outputs,
    ))
}

/// Monte Carlo estimate of `Cov(Q_t, price_t)` at the requested times, with
/// standard errors. Supply starts deterministically, so the covariance does
/// not depend on the reversion target; a zero target is used.
pub fn covariance_monte_carlo(
    params: &MarketParams,
    table: &CoefficientTable,
    sigma_s: f64,
    times: &[f64],
    mc_paths: usize,
    mc_steps: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if mc_paths < 2 || mc_steps == 0 {
        return Err(Error::InvalidParameter(
            "need at least two paths and one step".into(),
        ));
    }
    let supply = MeanRevertingSupply::new(|_| 0.0, sigma_s)?;
    let h = params.t_horizon / mc_steps as f64;
    let target_idx: Vec<usize> = times
        .iter()
        .map(|&t| {
            ((t / params.t_horizon * mc_steps as f64).round() as usize).min(mc_steps)
        })
        .collect();
    let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(mc_paths); times.len()];
    for path in 0..mc_paths {
        let mut rng = noise_rng(seed, path as u64);
        let (mut xbar, mut q, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for (slot, &idx) in target_idx.iter().enumerate() {
            if idx == 0 {
                samples[slot].push((q, w));
            }
        }
        for k in 0..mc_steps {
            let t = k as f64 * h;
            let z: f64 = rng.sample(StandardNormal);
            let dw = z * h.sqrt();
            let (b_p, sigma_p) = price_coefficients(params, table, &supply, t, xbar, q)?;
            xbar += h * q;
            w += h * b_p + sigma_p * dw;
            q += h * supply.drift(q, t) + sigma_s * dw;
            for (slot, &idx) in target_idx.iter().enumerate() {
                if idx == k + 1 {
                    samples[slot].push((q, w));
                }
            }
        }
    }
    let n = mc_paths as f64;
    Ok(samples
        .iter()
        .map(|obs| {
            let mq = obs.iter().map(|o| o.0).sum::<f64>() / n;
            let mw = obs.iter().map(|o| o.1).sum::<f64>() / n;
            let products: Vec<f64> = obs.iter().map(|o| (o.0 - mq) * (o.1 - mw)).collect();
            let cov = products.iter().sum::<f64>() / n;
            let var_prod = products
                .iter()
                .map(|p| (p - cov) * (p - cov))
                .sum::<f64>()
                / (n - 1.0);
            (cov, (var_prod / n).sqrt())
        })
        .collect())
}

fn cmd_covariance(args: &RunArgs) -> Result<CommandOutput> {
    let (cfg, value): (CovarianceConfig, Value) = load_config(&args.config, args.seed)?;
    cfg.params.validate()?;
    if !(cfg.sigma_s > 0.0) {
        return Err(Error::InvalidParameter("sigma_s must be > 0".into()));
    }
    let times: Vec<f64> = if cfg.times.is_empty() {
        (1..=4)
            .map(|k| cfg.params.t_horizon * k as f64 / 4.0)
            .collect()
    } else {
        cfg.times.clone()
    };
    let supply = MeanRevertingSupply::new(|_| 0.0, cfg.sigma_s)?;
    let table = integrate_coefficients(&cfg.params, &supply, cfg.ode_steps)?;
    let mc = covariance_monte_carlo(
        &cfg.params,
        &table,
        cfg.sigma_s,
        &times,
        cfg.mc_paths,
        cfg.mc_steps,
        cfg.seed,
    )?;
    let mut out = Table::new(&["t", "closed_form", "moment_ode", "monte_carlo", "mc_se"]);
    for (i, &t) in times.iter().enumerate() {
        let closed = match covariance_closed_form(&cfg.params, cfg.sigma_s, t) {
            Ok(v) => num(v),
            Err(Error::ClosedFormDomain(_)) => Value::Null,
            Err(e) => return Err(e),
        };
        let ode = covariance_moment_ode(&cfg.params, &table, cfg.sigma_s, t, 2000)?;
        out.push(vec![num(t), closed, num(ode), num(mc[i].0), num(mc[i].1)]);
    }
    let path = out.write(&args.out, "covariance", args.format)?;
    Ok((value, cfg.seed, Vec::new(), vec![path]))
}
