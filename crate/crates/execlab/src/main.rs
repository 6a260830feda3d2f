//! Experiment front end: configuration loading, orchestration of the
//! coefficient solvers, simulators, studies, and cost evaluations, and
//! artifact output with embedded provenance.
//!
//! Exit codes: 0 on success, 2 on a numeric fault (solver, simulation, or
//! artifact failure), 3 on a configuration or input-contract fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use execlab::coeffs::{
    chi_grid_for, save_limit, save_prelimit, solve_b0_deterministic, solve_b0_pde,
    solve_prelimit_deterministic, solve_prelimit_pde, LimitCoefficients, SolveError,
};
use execlab::config::{ConfigError, ExperimentConfig};
use execlab::costs::{cost_eta, cost_gap_envelope, cost_semimartingale, CostBreakdown, CostError};
use execlab::graphs::{convergence_study, StudyError};
use execlab::io::{self, IoError, Meta};
use execlab::limit::{build_limit_state, decompose_limit_strategy, LimitError};
use execlab::model::Penalty;
use execlab::pathsim::{simulate_bundle, PathBundle, PathError, SampledPath, TimeGrid};
use execlab::statesim::{integrate_state, liquidation_gap, StateError};
use execlab::strategies::{inventory, mollify, SemimartingaleStrategy, StrategyError};

use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "execlab",
    about = "Numerical laboratory for optimal execution with transient impact \
             under stochastic resilience",
    version
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration's run.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed range `a..b` (half-open), overriding run.seeds.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the backward coefficient systems and write field tables.
    SolveCoefficients,
    /// Simulate scenarios and integrate states for every eta, penalty, and
    /// the explicit limit.
    Simulate,
    /// Run the convergence study and write its report.
    Study,
    /// Evaluate a strategy file's cost; optionally also its mollification.
    Cost {
        /// Strategy JSON produced by `simulate` or written by hand.
        strategy: PathBuf,
        /// Tracker rate bound for the optional mollified evaluation.
        #[arg(long)]
        mollify_beta: Option<f64>,
        /// Tracker relaxation time for the optional mollified evaluation.
        #[arg(long)]
        mollify_nu: Option<f64>,
        /// Jump-smoothing window for the optional mollified evaluation.
        #[arg(long)]
        mollify_eps: Option<f64>,
    },
    /// Write the standard figure data set with a built-in configuration.
    ReproduceFig1,
}

/// Top-level fault taxonomy mapped onto exit codes.
enum AppError {
    /// Exit 3: the configuration or an input file violates its contract.
    Config(String),
    /// Exit 2: a numeric stage or artifact write failed.
    Numeric(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Config(_) => 3,
            AppError::Numeric(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<SolveError> for AppError {
    fn from(e: SolveError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<PathError> for AppError {
    fn from(e: PathError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<StateError> for AppError {
    fn from(e: StateError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<LimitError> for AppError {
    fn from(e: LimitError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<StudyError> for AppError {
    fn from(e: StudyError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<IoError> for AppError {
    fn from(e: IoError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<StrategyError> for AppError {
    fn from(e: StrategyError) -> Self {
        AppError::Config(format!("strategy violates its contract: {e}"))
    }
}

impl From<CostError> for AppError {
    fn from(e: CostError) -> Self {
        // Everything the cost evaluator rejects is an input-contract fault;
        // numeric faults surface earlier from the solvers and simulators.
        AppError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    if let Some(k) = cli.threads {
        // A secondary invocation in one process cannot resize the pool; the
        // first setting wins, which is fine for a CLI run.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    match &cli.command {
        Command::ReproduceFig1 => {
            let mut cfg = fig1_config();
            apply_overrides(&mut cfg, &cli)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fig1-out"));
            println!("writing standard figure data to {}", out.display());
            cmd_simulate(&cfg, &out)
        }
        command => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| AppError::Config("missing --config PATH".into()))?;
            let mut cfg = ExperimentConfig::load(path)?;
            apply_overrides(&mut cfg, &cli)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.run.out_dir.clone());
            match command {
                Command::SolveCoefficients => cmd_solve_coefficients(&cfg, &out),
                Command::Simulate => cmd_simulate(&cfg, &out),
                Command::Study => cmd_study(&cfg, &out),
                Command::Cost { strategy, mollify_beta, mollify_nu, mollify_eps } => {
                    cmd_cost(&cfg, &out, strategy, *mollify_beta, *mollify_nu, *mollify_eps)
                }
                Command::ReproduceFig1 => unreachable!(),
            }
        }
    }
}

/// Built-in configuration behind `reproduce-fig1`: unit horizon and
/// inventory, impact scale 3, unit risk, sine-modulated resilience, exact
/// liquidation, and a decreasing eta sweep.
fn fig1_config() -> ExperimentConfig {
    let text = r#"
        [model]
        gamma = 3.0
        T = 1.0
        x0 = 1.0
        penalty = "inf"

        [factor]
        family = "fig1-sine"
        lambda = 1.0

        [run]
        etas = [1e-1, 1e-2, 1e-3, 1e-4]
        seeds = [1]
        out_dir = "fig1-out"
    "#;
    ExperimentConfig::from_toml_str(text).expect("built-in configuration is valid")
}

fn apply_overrides(cfg: &mut ExperimentConfig, cli: &Cli) -> Result<(), AppError> {
    if let Some(spec) = &cli.seeds {
        cfg.run.seeds = parse_seed_range(spec)?;
        cfg.validate()?;
    }
    Ok(())
}

fn parse_seed_range(spec: &str) -> Result<Vec<u64>, AppError> {
    let parts: Vec<&str> = spec.split("..").collect();
    let bad = || AppError::Config(format!("--seeds expects a half-open range a..b, got {spec:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let a: u64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: u64 = parts[1].trim().parse().map_err(|_| bad())?;
    if a >= b {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn penalty_label(p: Penalty) -> String {
    format!("{p}")
}

/// Solve the limit system once and the positive-impact system per sweep
/// point; write field tables and binary caches.
fn cmd_solve_coefficients(cfg: &ExperimentConfig, out: &Path) -> Result<(), AppError> {
    let hash = cfg.config_hash();
    let meta = Meta::new(hash.clone());
    let grid = cfg.grid();
    let factor = cfg.factor();
    let opts = cfg.solver_options();
    let chi = chi_grid_for(&factor, cfg.model.horizon, cfg.numerics.chi_nodes, cfg.numerics.chi_stddevs);
    let base = cfg.params_for(cfg.run.etas[0], cfg.model.penalty);

    let (rho, lambda) = deterministic_inputs(cfg, &grid)?;
    let limit = if factor.deterministic {
        solve_b0_deterministic(&base, rho.as_ref().unwrap(), lambda.as_ref().unwrap())?
    } else {
        solve_b0_pde(&factor, &base, &chi, &grid)?
    };
    write_limit_fields(out, &limit, &meta, &hash)?;
    println!(
        "limit fields solved on {} x {} nodes; bound checks passed",
        grid.len(),
        limit.b0.n_chi()
    );

    for &eta in &cfg.run.etas {
        for penalty in cfg.penalties() {
            let params = cfg.params_for(eta, penalty);
            let fields = if factor.deterministic {
                solve_prelimit_deterministic(
                    &params,
                    rho.as_ref().unwrap(),
                    lambda.as_ref().unwrap(),
                    &opts,
                )?
            } else {
                solve_prelimit_pde(&factor, &params, &chi, &grid, &opts)?
            };
            let label = format!("eta{}_N{}", eta, penalty_label(penalty));
            let csv = out.join(format!("fields_{label}.csv"));
            io::write_fields_csv(
                &csv,
                &[("b", &fields.b), ("d", &fields.d), ("e", &fields.e)],
                &meta,
            )?;
            let key = io::stable_hash(format!("{hash}/{label}").as_bytes());
            save_prelimit(&out.join(format!("fields_{label}.bin")), key, &fields)
                .map_err(|e| AppError::Numeric(e.to_string()))?;
            println!(
                "eta = {eta}, N = {}: fields within a priori envelopes at all {} x {} nodes",
                penalty_label(penalty),
                grid.len(),
                fields.b.n_chi()
            );
        }
    }
    Ok(())
}

fn write_limit_fields(
    out: &Path,
    limit: &LimitCoefficients,
    meta: &Meta,
    hash: &str,
) -> Result<(), AppError> {
    io::write_fields_csv(
        &out.join("limit_fields.csv"),
        &[("b0", &limit.b0), ("d0", &limit.d0), ("e0", &limit.e0)],
        meta,
    )?;
    let key = io::stable_hash(format!("{hash}/limit").as_bytes());
    save_limit(&out.join("limit_fields.bin"), key, limit)
        .map_err(|e| AppError::Numeric(e.to_string()))?;
    Ok(())
}

/// Deterministic factors take the ODE fast path along constant-in-space
/// input paths; stochastic factors return `None` and use the spatial solver.
fn deterministic_inputs(
    cfg: &ExperimentConfig,
    grid: &std::sync::Arc<TimeGrid>,
) -> Result<(Option<SampledPath>, Option<SampledPath>), AppError> {
    let factor = cfg.factor();
    if !factor.deterministic {
        return Ok((None, None));
    }
    let base = cfg.params_for(cfg.run.etas[0], cfg.model.penalty);
    let bundle = simulate_bundle(&factor, &base, grid, cfg.run.seeds[0])?;
    Ok((Some(bundle.rho), Some(bundle.lambda)))
}

#[derive(Serialize)]
struct InvariantRow {
    eta: f64,
    penalty: Penalty,
    seed: u64,
    terminal_inventory: f64,
    sup_inventory: f64,
    inf_impact: f64,
    deficit_monotone_within: f64,
}

#[derive(Serialize)]
struct InvariantReport {
    rows: Vec<InvariantRow>,
}

/// Simulate every seed, integrate the state for each (eta, penalty), build
/// the limit state, and write per-path tables plus an invariant report.
fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), AppError> {
    let hash = cfg.config_hash();
    let grid = cfg.grid();
    let factor = cfg.factor();
    let opts = cfg.solver_options();
    let chi = chi_grid_for(&factor, cfg.model.horizon, cfg.numerics.chi_nodes, cfg.numerics.chi_stddevs);
    let base = cfg.params_for(cfg.run.etas[0], cfg.model.penalty);

    let bundles: Vec<PathBundle> = cfg
        .run
        .seeds
        .iter()
        .map(|&s| simulate_bundle(&factor, &base, &grid, s))
        .collect::<Result<_, _>>()?;

    let (rho, lambda) = deterministic_inputs(cfg, &grid)?;
    let limit = if factor.deterministic {
        solve_b0_deterministic(&base, rho.as_ref().unwrap(), lambda.as_ref().unwrap())?
    } else {
        solve_b0_pde(&factor, &base, &chi, &grid)?
    };

    for bundle in &bundles {
        let meta = Meta::with_seed(hash.clone(), bundle.seed);
        let state = build_limit_state(&limit, bundle, &base);
        let strat = decompose_limit_strategy(&state, &base)?;
        io::write_limit_csv(&out.join(format!("limit_seed{}.csv", bundle.seed)), &state, &strat, &meta)?;
        let sem = SemimartingaleStrategy {
            j_plus: vec![],
            j_minus: strat.j_minus.clone(),
            v: strat.v_hat.clone(),
            liquidating: true,
        };
        io::write_strategy_json(
            &out.join(format!("limit_strategy_seed{}.json", bundle.seed)),
            &sem,
            &meta,
        )?;
        io::write_bundle_csv(&out.join(format!("bundle_seed{}.csv", bundle.seed)), bundle, &meta)?;
    }

    let mut rows = Vec::new();
    for &eta in &cfg.run.etas {
        for penalty in cfg.penalties() {
            let params = cfg.params_for(eta, penalty);
            let fields = if factor.deterministic {
                solve_prelimit_deterministic(
                    &params,
                    rho.as_ref().unwrap(),
                    lambda.as_ref().unwrap(),
                    &opts,
                )?
            } else {
                solve_prelimit_pde(&factor, &params, &chi, &grid, &opts)?
            };
            let states: Vec<_> = bundles
                .par_iter()
                .map(|b| integrate_state(&fields, b, &params).map(|s| (b.seed, s)))
                .collect::<Result<_, _>>()?;
            for (seed, state) in &states {
                let meta = Meta::with_seed(hash.clone(), *seed);
                let name = format!(
                    "state_eta{}_N{}_seed{}.csv",
                    eta,
                    penalty_label(penalty),
                    seed
                );
                io::write_state_csv(&out.join(name), state, &meta)?;
                let mono = state
                    .zhat
                    .values
                    .windows(2)
                    .map(|w| (w[1] - w[0]).max(0.0))
                    .fold(0.0f64, f64::max);
                rows.push(InvariantRow {
                    eta,
                    penalty,
                    seed: *seed,
                    terminal_inventory: liquidation_gap(state),
                    sup_inventory: state.xhat.values.iter().cloned().fold(f64::MIN, f64::max),
                    inf_impact: state.yhat.values.iter().cloned().fold(f64::MAX, f64::min),
                    deficit_monotone_within: mono,
                });
            }
        }
    }
    io::write_report_json(&out.join("invariants.json"), &InvariantReport { rows }, &Meta::new(hash))?;
    println!(
        "simulated {} seeds x {} etas x {} penalties onto {}",
        cfg.run.seeds.len(),
        cfg.run.etas.len(),
        cfg.penalties().len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StudyDoc<'a> {
    seeds: &'a [u64],
    #[serde(flatten)]
    report: &'a execlab::graphs::ConvergenceReport,
}

/// Decreasing-eta convergence study against the explicit limit.
fn cmd_study(cfg: &ExperimentConfig, out: &Path) -> Result<(), AppError> {
    let hash = cfg.config_hash();
    let mut etas = cfg.run.etas.clone();
    etas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    etas.dedup();
    let params = cfg.params_for(etas[0], cfg.model.penalty);
    let factor = cfg.factor();
    let report = convergence_study(&params, &factor, &etas, &cfg.run.seeds, cfg.numerics.eps_band)?;
    let meta = Meta::new(hash);
    io::write_report_json(
        &out.join("study.json"),
        &StudyDoc { seeds: &cfg.run.seeds, report: &report },
        &meta,
    )?;
    io::write_study_csv(&out.join("study.csv"), &report, &meta)?;
    let last = report.fraction_within.last().unwrap();
    println!(
        "study complete: graph distance within {} for {:.0}% of paths at eta = {}",
        report.eps,
        100.0 * last,
        report.eta_values.last().unwrap()
    );
    Ok(())
}

#[derive(Serialize)]
struct MollifiedDoc {
    beta: f64,
    nu: f64,
    eps: f64,
    eta: f64,
    cost: CostBreakdown,
    gap_to_base: f64,
    stability_envelope: f64,
}

#[derive(Serialize)]
struct CostDoc {
    seeds: Vec<u64>,
    base: CostBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    mollified: Option<MollifiedDoc>,
}

/// Cost of a strategy file; with all three mollification flags, also the
/// cost of its smoothed version and the stability-envelope budget.
/// Resample a strategy onto the union of its own nodes, its jump times and a
/// uniform grid. The flow component is piecewise linear between file nodes, so
/// the resampled strategy represents the same process while the impact-decay
/// quadrature no longer depends on how coarsely the input file sampled time.
fn refine_strategy(
    theta: &SemimartingaleStrategy,
    horizon: f64,
    steps: usize,
) -> SemimartingaleStrategy {
    let mut times: Vec<f64> = Vec::with_capacity(theta.v.grid.len() + steps + 1);
    times.extend_from_slice(&theta.v.grid.t);
    times.extend((0..=steps).map(|i| horizon * i as f64 / steps as f64));
    times.extend(theta.j_plus.iter().chain(&theta.j_minus).map(|j| j.0));
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * horizon.max(1.0));
    let grid = TimeGrid::from_times(times);
    let v = grid.t.iter().map(|&t| theta.v.value_at(t)).collect();
    SemimartingaleStrategy {
        j_plus: theta.j_plus.clone(),
        j_minus: theta.j_minus.clone(),
        v: SampledPath::new(grid.clone(), v),
        liquidating: theta.liquidating,
    }
}

fn cmd_cost(
    cfg: &ExperimentConfig,
    out: &Path,
    strategy_path: &Path,
    beta: Option<f64>,
    nu: Option<f64>,
    eps: Option<f64>,
) -> Result<(), AppError> {
    let hash = cfg.config_hash();
    let theta = io::read_strategy_json(strategy_path).map_err(|e| AppError::Config(e.to_string()))?;
    let theta = refine_strategy(&theta, cfg.model.horizon, cfg.numerics.time_steps);
    let grid = cfg.grid();
    let factor = cfg.factor();
    let base_params = cfg.params_for(cfg.run.etas[0], cfg.model.penalty);
    let bundles: Vec<PathBundle> = cfg
        .run
        .seeds
        .iter()
        .map(|&s| simulate_bundle(&factor, &base_params, &grid, s))
        .collect::<Result<_, _>>()?;

    let mut zero_eta = base_params.clone();
    zero_eta.eta = 0.0;
    let base = cost_semimartingale(&theta, &bundles, &zero_eta)?;
    println!("flow-functional cost: {:.6} +/- {:.6}", base.total, base.stderr);

    let mollified = match (beta, nu, eps) {
        (Some(b), Some(n), Some(e)) => {
            let xi = mollify(&theta, base_params.x0, b, n, e, &grid);
            let smooth_cost = cost_eta(&xi, &bundles, &base_params)?;
            let x_theta = inventory(&theta, base_params.x0, &grid)?;
            let x_smooth = xi.xi.cumtrapz().map(|v| v + base_params.x0);
            let mut sq = vec![0.0; x_smooth.values.len()];
            for (i, v) in sq.iter_mut().enumerate() {
                let t = x_smooth.grid.t[i];
                let d = x_smooth.values[i] - x_theta.value_at(t);
                *v = d * d;
            }
            let d2 = SampledPath::new(x_smooth.grid.clone(), sq).trapz();
            let s_theta = x_theta.map(|v| v * v).trapz();
            let envelope = cost_gap_envelope(s_theta, &zero_eta) * (d2.sqrt() + d2);
            let gap = (smooth_cost.total - base.total).abs();
            println!(
                "mollified at (beta, nu, eps) = ({b}, {n}, {e}): cost {:.6}, gap {:.3e} within envelope {:.3e}",
                smooth_cost.total, gap, envelope
            );
            Some(MollifiedDoc {
                beta: b,
                nu: n,
                eps: e,
                eta: base_params.eta,
                cost: smooth_cost,
                gap_to_base: gap,
                stability_envelope: envelope,
            })
        }
        (None, None, None) => None,
        _ => {
            return Err(AppError::Config(
                "mollification needs all of --mollify-beta, --mollify-nu, --mollify-eps".into(),
            ))
        }
    };

    let doc = CostDoc { seeds: cfg.run.seeds.clone(), base, mollified };
    io::write_report_json(&out.join("cost.json"), &doc, &Meta::new(hash))?;
    Ok(())
}
