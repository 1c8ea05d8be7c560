//! Command-line runner: estimate a model from midprice data, solve the
//! liquidation coefficients, and backtest strategies under Monte Carlo.
//!
//! Exit codes: 0 success, 2 validation/input failure, 3 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use cointexec::estimation::{self, MidpriceSeries, SeMethod};
use cointexec::model::{MarketModel, ModelDoc, OrderFlowModel, PenaltySpec};
use cointexec::riccati;
use cointexec::sim::{self, SimConfig, SimRun};
use cointexec::strategy::{InfoScenario, StrategyKind, StrategySpec};
use cointexec::CointexecError;

#[derive(Parser)]
#[command(
    name = "cointexec",
    about = "Optimal liquidation of co-integrated baskets: estimate, solve, backtest",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the continuous-time model from a midprice (or quotes) CSV panel.
    Estimate(EstimateArgs),
    /// Solve the liquidation coefficients for a model document.
    Solve(SolveArgs),
    /// Monte Carlo comparison of liquidation strategies.
    Backtest(BacktestArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV: header row with labels, first column timestamp (seconds),
    /// remaining columns midprices — or per-asset bid/ask/bid_size/ask_size
    /// quadruples with --quotes.
    #[arg(long)]
    data: PathBuf,
    /// Treat the input as best-quote columns and build microprices.
    #[arg(long)]
    quotes: bool,
    /// Output directory for model.json and fit_report.json.
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// Number of traded assets (the first m columns).
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Diagonal of the temporary impact matrix, comma separated (length m).
    #[arg(long, default_value = "0.44e-6,0.71e-6")]
    a_diag: String,
    /// Running penalty φ written into the model document.
    #[arg(long, default_value_t = 1e-3)]
    phi: f64,
    /// Terminal liquidation penalty (scalar, applied as α·I).
    #[arg(long, default_value_t = 1e6)]
    alpha: f64,
    /// Report bootstrap standard errors (slower) instead of delta-method ones.
    #[arg(long)]
    bootstrap_se: bool,
    /// Convert timestamps from seconds to trading-day units (6.5 h = 1).
    #[arg(long, default_value_t = true)]
    seconds_to_days: bool,
}

#[derive(Args)]
struct SolveArgs {
    /// Model document (cointexec-model-v1 JSON).
    #[arg(long)]
    model: PathBuf,
    /// Solve horizon in model time units.
    #[arg(long, default_value_t = 1.0 / 6.5)]
    horizon: f64,
    /// Grid steps over [0, horizon].
    #[arg(long, default_value_t = riccati::DEFAULT_GRID_STEPS)]
    grid_steps: usize,
    /// Dump the solution grid (t, vec A, vec C, vec E) to this CSV path.
    #[arg(long)]
    dump_grid: Option<PathBuf>,
    /// Keep every k-th grid row in the dump.
    #[arg(long, default_value_t = 100)]
    dump_stride: usize,
}

#[derive(Args, Clone)]
struct BacktestArgs {
    /// Model document (cointexec-model-v1 JSON).
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON run-configuration file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated φ grid.
    #[arg(long)]
    phi: Option<String>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// full | partial
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated strategy list from {UL, RL, ULT, AC, UL-tail}.
    #[arg(long)]
    strategies: Option<String>,
    /// Execution window in model time units.
    #[arg(long)]
    horizon: Option<f64>,
    /// Initial inventory, comma separated (length m).
    #[arg(long)]
    q0: Option<String>,
    /// Near-terminal series switch width as a fraction of the horizon
    /// (UL-tail strategy).
    #[arg(long)]
    tau_switch: Option<f64>,
    /// Fit report from `estimate`, used for the benchmark covariance Σ^AC.
    #[arg(long)]
    fit_report: Option<PathBuf>,
    /// Write the per-path wealth dump.
    #[arg(long)]
    per_path: bool,
}

/// Persisted run configuration: the manifest echoes exactly this structure,
/// so a rerun from the manifest reproduces outputs byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    model_path: PathBuf,
    output_dir: PathBuf,
    phi_grid: Vec<f64>,
    path_count: usize,
    step_count: usize,
    rng_seed: u64,
    scenario: String,
    strategies: Vec<String>,
    horizon: f64,
    q0: Vec<f64>,
    tau_switch_frac: f64,
    fit_report: Option<PathBuf>,
    per_path: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_path: PathBuf::from("model.json"),
            output_dir: PathBuf::from("out"),
            phi_grid: vec![1e-3],
            path_count: 10_000,
            step_count: 3600,
            rng_seed: 1,
            scenario: "full".into(),
            strategies: vec!["UL".into(), "RL".into(), "ULT".into(), "AC".into()],
            horizon: 1.0 / 6.5,
            q0: vec![4600.0, 900.0],
            tau_switch_frac: 0.01,
            fit_report: None,
            per_path: false,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Backtest(args) => cmd_backtest(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match &err {
                CointexecError::Io(_) | CointexecError::Csv(_) => 3u8,
                _ => 2u8,
            };
            ExitCode::from(code)
        }
    }
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

fn cmd_estimate(args: EstimateArgs) -> Result<(), CointexecError> {
    let series = if args.quotes {
        read_quotes_csv(&args.data, args.seconds_to_days)?
    } else {
        read_midprice_csv(&args.data, args.seconds_to_days)?
    };
    let se_method = if args.bootstrap_se {
        SeMethod::Bootstrap { reps: 120, seed: 1 }
    } else {
        SeMethod::Delta
    };
    let fit = estimation::fit_var_opts(&series, se_method)?;
    let sigma_ac = estimation::benchmark_covariance(&series, args.m.min(series.n_assets()))?;

    let a_diag = parse_f64_list(&args.a_diag)?;
    if a_diag.len() != args.m {
        return Err(CointexecError::InvalidInput(format!(
            "--a-diag needs {} entries, got {}",
            args.m,
            a_diag.len()
        )));
    }
    let n = series.n_assets();
    let model = MarketModel::new(
        fit.kappa_matrix(),
        fit.theta_vector(),
        fit.sigma_matrix(),
        DMatrix::zeros(n, n),
        DMatrix::zeros(n, n),
        DMatrix::from_diagonal(&DVector::from_vec(a_diag)),
        args.m,
    )?;
    let penalty = PenaltySpec::isotropic(args.phi, args.alpha, &model)?;
    let report = model.validate(&penalty);
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(CointexecError::Validation(format!(
            "estimated model fails validation: {}",
            names.join("; ")
        )));
    }

    fs::create_dir_all(&args.output_dir)?;
    let doc = ModelDoc::from_parts(&model, &penalty);
    write_json(&args.output_dir.join("model.json"), &doc)?;

    #[derive(Serialize)]
    struct FitReport<'a> {
        fit: &'a estimation::VarFit,
        sigma_ac: Vec<Vec<f64>>,
        cointegration_weights: Option<Vec<f64>>,
    }
    let weights = estimation::cointegration_weights(&fit)
        .ok()
        .map(|w| w.iter().copied().collect());
    write_json(
        &args.output_dir.join("fit_report.json"),
        &FitReport {
            fit: &fit,
            sigma_ac: cointexec::model::matrix_to_rows(&sigma_ac),
            cointegration_weights: weights,
        },
    )?;

    println!(
        "fitted {} assets over {} observations (dt = {:.3e}); cointegration rank = {}",
        series.n_assets(),
        fit.n_obs,
        fit.dt,
        fit.rank
    );
    println!(
        "wrote {} and fit_report.json",
        args.output_dir.join("model.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn cmd_solve(args: SolveArgs) -> Result<(), CointexecError> {
    let (model, penalty) = load_model(&args.model)?;
    let report = model.validate(&penalty);
    print_validation(&report);
    if !report.passed() {
        return Err(CointexecError::Validation(
            "model failed validation; see report above".into(),
        ));
    }
    let sol = riccati::solve_for_model(&model, &penalty, args.horizon, args.grid_steps)?;
    println!(
        "solved {} grid points over [0, {:.6}]: max|G| = {:.4e}, terminal residual = {:.2e}",
        sol.grid_len(),
        args.horizon,
        sol.g_max_abs(),
        sol.terminal_residual()
    );
    let c0 = sol.c_at(0.0);
    println!("C(0) = {c0:.6}");

    if let Some(path) = &args.dump_grid {
        let stride = args.dump_stride.max(1);
        let mut writer = csv::Writer::from_path(path)?;
        let n = model.n;
        let m = model.m;
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                header.push(format!("A_{i}{j}"));
            }
        }
        for i in 0..m {
            for j in 0..m {
                header.push(format!("C_{i}{j}"));
            }
        }
        for i in 0..n {
            for j in 0..m {
                header.push(format!("E_{i}{j}"));
            }
        }
        writer.write_record(&header)?;
        for k in (0..sol.grid_len()).step_by(stride) {
            let mut row = vec![format!("{:.12e}", sol.times[k])];
            for v in sol.a_grid[k].iter() {
                row.push(format!("{v:.12e}"));
            }
            for v in sol.c_grid[k].iter() {
                row.push(format!("{v:.12e}"));
            }
            for v in sol.e_grid[k].iter() {
                row.push(format!("{v:.12e}"));
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        println!("dumped solution grid to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

fn cmd_backtest(args: BacktestArgs) -> Result<(), CointexecError> {
    // Config file first, explicit flags override.
    let mut config = match &args.config {
        Some(path) => serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.model {
        config.model_path = v.clone();
    }
    if let Some(v) = &args.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = &args.phi {
        config.phi_grid = parse_f64_list(v)?;
    }
    if let Some(v) = args.paths {
        config.path_count = v;
    }
    if let Some(v) = args.steps {
        config.step_count = v;
    }
    if let Some(v) = args.seed {
        config.rng_seed = v;
    }
    if let Some(v) = &args.scenario {
        config.scenario = v.clone();
    }
    if let Some(v) = &args.strategies {
        config.strategies = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(v) = args.horizon {
        config.horizon = v;
    }
    if let Some(v) = &args.q0 {
        config.q0 = parse_f64_list(v)?;
    }
    if let Some(v) = args.tau_switch {
        config.tau_switch_frac = v;
    }
    if let Some(v) = &args.fit_report {
        config.fit_report = Some(v.clone());
    }
    if args.per_path {
        config.per_path = true;
    }
    if config.phi_grid.iter().any(|&p| p < 0.0) {
        return Err(CointexecError::InvalidInput(
            "phi values must be >= 0".into(),
        ));
    }

    let (model, penalty) = load_model(&config.model_path)?;
    let report = model.validate(&penalty);
    if !report.passed() {
        print_validation(&report);
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(CointexecError::Validation(format!(
            "bounded-solution precondition failed: {}",
            names.join("; ")
        )));
    }

    let scenario = match config.scenario.as_str() {
        "full" | "FullInfo" => InfoScenario::FullInfo,
        "partial" | "PartialInfo" => InfoScenario::PartialInfo,
        other => {
            return Err(CointexecError::InvalidInput(format!(
                "unknown scenario `{other}` (use full|partial)"
            )))
        }
    };
    let specs: Vec<StrategySpec> = config
        .strategies
        .iter()
        .map(|name| {
            let kind = match name.as_str() {
                "UL" => StrategyKind::Unrestricted,
                "RL" => StrategyKind::Restricted,
                "ULT" => StrategyKind::TargetTracking,
                "AC" => StrategyKind::AlmgrenChriss,
                "UL-tail" => StrategyKind::SeriesTail,
                other => {
                    return Err(CointexecError::InvalidInput(format!(
                        "unknown strategy `{other}` (use UL|RL|ULT|AC|UL-tail)"
                    )))
                }
            };
            let mut spec = StrategySpec::new(kind, penalty.phi, penalty.alpha_term.clone());
            spec.tau_switch_frac = config.tau_switch_frac;
            Ok(spec)
        })
        .collect::<Result<_, _>>()?;

    let sigma_ac = match &config.fit_report {
        Some(path) => {
            #[derive(Deserialize)]
            struct FitReportIn {
                sigma_ac: Vec<Vec<f64>>,
            }
            let report: FitReportIn = serde_json::from_str(&fs::read_to_string(path)?)?;
            Some(cointexec::model::rows_to_matrix(
                &report.sigma_ac,
                "sigma_ac",
            )?)
        }
        None => None,
    };

    let mut sim_config = SimConfig::new(&model, DVector::from_vec(config.q0.clone()));
    sim_config.path_count = config.path_count;
    sim_config.step_count = config.step_count;
    sim_config.rng_seed = config.rng_seed;
    sim_config.scenario = scenario;
    sim_config.horizon = config.horizon;
    sim_config.sigma_ac = sigma_ac;

    let run = sim::compare_strategies(
        &model,
        &OrderFlowModel::Zero,
        &sim_config,
        &specs,
        &config.phi_grid,
    )?;

    fs::create_dir_all(&config.output_dir)?;
    write_json(&config.output_dir.join("summary.json"), &run)?;
    write_summary_csv(&config.output_dir.join("summary.csv"), &run)?;
    if config.per_path {
        write_per_path_csv(&config.output_dir.join("per_path.csv"), &run)?;
    }

    #[derive(Serialize)]
    struct Manifest<'a> {
        tool_version: &'static str,
        config: &'a RunConfig,
    }
    write_json(
        &config.output_dir.join("manifest.json"),
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            config: &config,
        },
    )?;

    for outcome in &run.outcomes {
        for s in &outcome.strategies {
            if s.label != "AC" {
                println!(
                    "phi = {:>9.2e}  {:<8} median savings {:>7.2} bps (mean {:>6.2} ± {:.2})",
                    outcome.phi,
                    s.label,
                    s.savings_quantiles_bps[2],
                    s.mean_savings_bps,
                    s.se_savings_bps
                );
            }
        }
    }
    println!("wrote results to {}", config.output_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV / JSON plumbing
// ---------------------------------------------------------------------------

fn parse_f64_list(s: &str) -> Result<Vec<f64>, CointexecError> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| CointexecError::InvalidInput(format!("bad number `{tok}`")))
        })
        .collect()
}

const SECONDS_PER_DAY: f64 = 6.5 * 3600.0;

fn read_midprice_csv(path: &Path, seconds_to_days: bool) -> Result<MidpriceSeries, CointexecError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(CointexecError::InvalidInput(format!(
            "{}: need a timestamp column and at least one price column",
            path.display()
        )));
    }
    let labels: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut timestamps = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize| -> Result<f64, CointexecError> {
            record
                .get(idx)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    CointexecError::InvalidInput(format!(
                        "{}: line {}: bad field {}",
                        path.display(),
                        line + 2,
                        idx + 1
                    ))
                })
        };
        let mut t = parse(0)?;
        if seconds_to_days {
            t /= SECONDS_PER_DAY;
        }
        timestamps.push(t);
        rows.push((1..headers.len()).map(parse).collect::<Result<_, _>>()?);
    }
    let n = labels.len();
    let prices = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    MidpriceSeries::new(timestamps, prices, labels)
}

fn read_quotes_csv(path: &Path, seconds_to_days: bool) -> Result<MidpriceSeries, CointexecError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = headers.len();
    if cols < 5 || (cols - 1) % 4 != 0 {
        return Err(CointexecError::InvalidInput(format!(
            "{}: quotes format needs timestamp plus bid/ask/bid_size/ask_size per asset",
            path.display()
        )));
    }
    let n = (cols - 1) / 4;
    let labels: Vec<String> = (0..n)
        .map(|j| {
            headers
                .get(1 + 4 * j)
                .map(|h| h.trim_end_matches("_bid").to_string())
                .unwrap_or_else(|| format!("A{j}"))
        })
        .collect();
    let mut timestamps = Vec::new();
    let mut raw: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(cols);
        for idx in 0..cols {
            let v = record
                .get(idx)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    CointexecError::InvalidInput(format!(
                        "{}: line {}: bad field {}",
                        path.display(),
                        line + 2,
                        idx + 1
                    ))
                })?;
            row.push(v);
        }
        let mut t = row[0];
        if seconds_to_days {
            t /= SECONDS_PER_DAY;
        }
        timestamps.push(t);
        raw.push(row);
    }
    let rows = raw.len();
    let pick = |off: usize| DMatrix::from_fn(rows, n, |i, j| raw[i][1 + 4 * j + off]);
    estimation::microprice_from_quotes(timestamps, &pick(0), &pick(1), &pick(2), &pick(3), labels)
}

fn load_model(path: &Path) -> Result<(MarketModel, PenaltySpec), CointexecError> {
    let doc: ModelDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    doc.into_parts()
}

fn print_validation(report: &cointexec::model::ValidationReport) {
    for check in &report.checks {
        let eig = check
            .min_eigenvalue
            .map(|v| format!(" (min eigenvalue {v:.4e})"))
            .unwrap_or_default();
        println!(
            "validate: [{}] {}{}",
            if check.passed { "ok" } else { "FAIL" },
            check.name,
            eig
        );
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CointexecError> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

fn write_summary_csv(path: &Path, run: &SimRun) -> Result<(), CointexecError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["phi", "strategy", "statistic", "value"])?;
    for outcome in &run.outcomes {
        for s in &outcome.strategies {
            let phi = format!("{:e}", outcome.phi);
            let mut put = |stat: &str, value: f64| -> Result<(), CointexecError> {
                writer.write_record([
                    phi.as_str(),
                    s.label.as_str(),
                    stat,
                    &format!("{value:.10e}"),
                ])?;
                Ok(())
            };
            put("mean_wealth", s.mean_wealth)?;
            put("std_wealth", s.std_wealth)?;
            put("mean_savings_bps", s.mean_savings_bps)?;
            put("se_savings_bps", s.se_savings_bps)?;
            for (level, q) in sim::SAVINGS_QUANTILES.iter().zip(&s.savings_quantiles_bps) {
                put(&format!("savings_q{:02.0}_bps", level * 100.0), *q)?;
            }
            put("underperform_pct", s.underperform_pct)?;
            for (i, v) in s.repurchase_path_pct.iter().enumerate() {
                put(&format!("repurchase_path_pct_{i}"), *v)?;
            }
            for (i, v) in s.negative_speed_step_pct.iter().enumerate() {
                put(&format!("negative_speed_step_pct_{i}"), *v)?;
            }
            for (i, v) in s.max_abs_terminal_inventory.iter().enumerate() {
                put(&format!("max_abs_terminal_inventory_{i}"), *v)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

fn write_per_path_csv(path: &Path, run: &SimRun) -> Result<(), CointexecError> {
    let mut writer = csv::Writer::from_path(path)?;
    let assets = run
        .outcomes
        .first()
        .and_then(|o| o.repurchased.first())
        .and_then(|s| s.first())
        .map(|flags| flags.len())
        .unwrap_or(0);
    let mut header = vec![
        "phi".to_string(),
        "strategy".to_string(),
        "path".to_string(),
        "terminal_wealth".to_string(),
        "savings_bps".to_string(),
    ];
    for i in 0..assets {
        header.push(format!("repurchased_{i}"));
    }
    writer.write_record(&header)?;
    for outcome in &run.outcomes {
        for (j, label) in run.labels.iter().enumerate() {
            for p in 0..outcome.wealth[j].len() {
                let mut row = vec![
                    format!("{:e}", outcome.phi),
                    label.clone(),
                    p.to_string(),
                    format!("{:.10e}", outcome.wealth[j][p]),
                    format!("{:.10e}", outcome.savings_bps[j][p]),
                ];
                for i in 0..assets {
                    row.push(u8::from(outcome.repurchased[j][p][i]).to_string());
                }
                writer.write_record(&row)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}
