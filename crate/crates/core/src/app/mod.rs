//! Command-line front end: configuration loading, subcommand dispatch and output files.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 usage error, 3 configuration error,
//! 4 numerical failure, 5 output could not be written.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::Error;
use crate::forward::{evaluate_cost, solve_forward};
use crate::gradients::{adjoint_gradient, check_gradients, insertion_scan, uniform_grid};
use crate::model::ModeIndex;
use crate::optimize::{optimize_sequence, optimize_times, OptimizationTrace};

pub use config::{Problem, RunConfig};
use report::{error_value, label, list, num, write_json, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "hyswitch", version, about = "Switching-time and mode-insertion optimization for hybrid systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Largest integration step.
    #[arg(long = "h-max", global = true, allow_hyphen_values = true)]
    pub h_max: Option<f64>,
    /// Finite-difference step for switching times.
    #[arg(long = "fd-step", global = true, allow_hyphen_values = true)]
    pub fd_step: Option<f64>,
    /// Stationarity tolerance of the optimizer.
    #[arg(long = "kkt-tol", global = true, allow_hyphen_values = true)]
    pub kkt_tol: Option<f64>,
    /// Seed for the randomized reset composition check.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate the hybrid trajectory and evaluate the cost.
    Simulate,
    /// Adjoint switching-time gradient and stationarity residual.
    Gradient,
    /// Compare adjoint, variational and finite-difference gradients.
    CheckGrad,
    /// Mode-insertion gradients on a time grid.
    InsertScan,
    /// Optimize switching times for the configured sequence.
    Optimize,
    /// Alternate time optimization with mode insertions.
    FullOpt,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Gradient => "gradient",
            Command::CheckGrad => "check-grad",
            Command::InsertScan => "insert-scan",
            Command::Optimize => "optimize",
            Command::FullOpt => "full-opt",
        }
    }
}

/// Outcome of one subcommand before anything is written.
struct Output {
    tables: Vec<(&'static str, Table)>,
    results: Value,
    code: i32,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    run(&cli)
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) {
    if let Some(h) = cli.h_max {
        cfg.stepper.h_max = Some(h);
    }
    if let Some(h) = cli.fd_step {
        cfg.fd.step = Some(h);
    }
    if let Some(t) = cli.kkt_tol {
        cfg.optimizer.kkt_tol = t;
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    cfg.optimizer.chain.seed = cfg.run.seed;
    cfg.optimizer.execution = cfg.run.execution;
}

fn check_overrides(cfg: &RunConfig) -> Result<(), Error> {
    let positive = |name: &str, v: Option<f64>| match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(Error::Config(format!("{name} must be positive, got {x}"))),
        _ => Ok(()),
    };
    positive("h-max", cfg.stepper.h_max)?;
    positive("fd-step", cfg.fd.step)?;
    positive("kkt-tol", Some(cfg.optimizer.kkt_tol))
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> i32 {
    let command = cli.command.name();
    let Some(path) = &cli.config else {
        eprintln!("error: --config PATH is required\n\n{}", usage());
        return EXIT_USAGE;
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return EXIT_IO;
    }
    let report_path = cli.out.join("report.json");
    let prepared = RunConfig::load_with_text(path).and_then(|(mut cfg, text)| {
        apply_overrides(cli, &mut cfg);
        check_overrides(&cfg)?;
        let problem = cfg.problem().map_err(|e| match e {
            Error::Config(m) => Error::Config(config::annotate_line(&text, &m)),
            other => other,
        })?;
        Ok((cfg, problem))
    });
    let (cfg, problem) = match prepared {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            let report = json!({
                "schema_version": report::SCHEMA_VERSION,
                "command": command,
                "status": "error",
                "exit_code": EXIT_CONFIG,
                "error": error_value(&e),
            });
            let _ = write_json(&report_path, &report);
            return EXIT_CONFIG;
        }
    };
    let outcome = execute(cli.command, &cfg, &problem);
    let (status, code, error, results) = match &outcome {
        Ok(out) => (if out.code == EXIT_OK { "ok" } else { "failed" }, out.code, Value::Null, out.results.clone()),
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG };
            ("error", code, error_value(e), Value::Null)
        }
    };
    let report = json!({
        "schema_version": report::SCHEMA_VERSION,
        "command": command,
        "status": status,
        "exit_code": code,
        "error": error,
        "settings": settings(&cfg, &problem),
        "problem": {
            "horizon": problem.system.horizon(),
            "state_dim": problem.system.state_dim(),
            "mode_count": problem.system.modes().len(),
            "modes": problem.modes.indices(),
            "schedule": problem.schedule.interior(),
        },
        "results": results,
    });
    let written = outcome
        .iter()
        .flat_map(|o| o.tables.iter())
        .try_for_each(|(name, table)| table.write(&cli.out.join(name)))
        .and_then(|_| write_json(&report_path, &report));
    if let Err(e) = written {
        eprintln!("error: cannot write to {}: {e}", cli.out.display());
        return EXIT_IO;
    }
    code
}

fn usage() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string()
}

/// Every tolerance and mesh setting in force, resolved against the horizon.
fn settings(cfg: &RunConfig, problem: &Problem) -> Value {
    let horizon = problem.system.horizon();
    let opt = &cfg.optimizer;
    json!({
        "stepper": {
            "kind": label(&cfg.stepper.kind),
            "h_max": cfg.stepper.step_bound(horizon),
            "stiffness_threshold": cfg.stepper.stiffness_threshold,
            "blowup_factor": cfg.stepper.blowup_factor,
        },
        "fd": { "step": cfg.fd.step_for(horizon), "tolerance": cfg.fd.tolerance },
        "check": cfg.check,
        "scan": { "grid": cfg.scan.grid, "times": cfg.scan.times, "candidates": cfg.scan.candidates },
        "optimizer": {
            "max_iters": opt.max_iters,
            "sigma": opt.sigma,
            "beta": opt.beta,
            "initial_step": opt.initial_step,
            "kkt_tol": opt.kkt_tol,
            "min_step": opt.min_step,
            "coincidence_eps": opt.coincidence_eps.unwrap_or(1e-9 * horizon),
            "insertion_threshold": opt.insertion_threshold,
            "insertion_grid": opt.insertion_grid,
            "max_insertions": opt.max_insertions,
            "candidates": opt.candidates,
        },
        "chain": opt.chain,
        "seed": cfg.run.seed,
        "execution": label(&cfg.run.execution),
        "parallel_feature": cfg!(feature = "parallel"),
    })
}

fn execute(command: Command, cfg: &RunConfig, p: &Problem) -> Result<Output, Error> {
    match command {
        Command::Simulate => simulate(cfg, p),
        Command::Gradient => gradient(cfg, p),
        Command::CheckGrad => check_grad(cfg, p),
        Command::InsertScan => insert_scan(cfg, p),
        Command::Optimize => {
            let trace = optimize_times(&p.system, &p.modes, &p.schedule, &cfg.optimizer, &cfg.stepper)?;
            Ok(optimization_output(&trace))
        }
        Command::FullOpt => {
            let trace = optimize_sequence(&p.system, &p.modes, &p.schedule, &cfg.optimizer, &cfg.stepper)?;
            Ok(optimization_output(&trace))
        }
    }
}

fn state_header(prefix: &[&str], dim: usize) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain((0..dim).map(|i| format!("z{i}"))).collect()
}

fn simulate(cfg: &RunConfig, p: &Problem) -> Result<Output, Error> {
    let traj = solve_forward(&p.system, &p.modes, &p.schedule, &cfg.stepper)?;
    let cost = evaluate_cost(&p.system, &traj);
    let mut table = Table::new(state_header(&["time", "segment", "mode", "side"], p.system.state_dim()));
    let last = traj.segments().len() - 1;
    for (n, seg) in traj.segments().iter().enumerate() {
        let count = seg.knots().len();
        for (i, (t, z)) in seg.knots().iter().zip(seg.values()).enumerate() {
            // left limit at the closing switch, value after the reset at the opening switch
            let side = if i + 1 == count && n < last {
                "left"
            } else if i == 0 && n > 0 {
                "right"
            } else {
                ""
            };
            let mut row = vec![num(*t), n.to_string(), seg.mode.to_string(), side.to_string()];
            row.extend(z.iter().map(|x| num(*x)));
            table.push(row);
        }
    }
    let methods: Vec<String> = traj.segments().iter().map(|s| label(&s.method)).collect();
    let steps: Vec<usize> = traj.segments().iter().map(|s| s.steps()).collect();
    let results = json!({
        "final_state": traj.final_state().as_slice(),
        "cost": cost,
        "segment_methods": methods,
        "segment_steps": steps,
    });
    Ok(Output { tables: vec![("trajectory.csv", table)], results, code: EXIT_OK })
}

fn gradient(cfg: &RunConfig, p: &Problem) -> Result<Output, Error> {
    let (traj, report) = adjoint_gradient(&p.system, &p.modes, &p.schedule, &cfg.stepper)?;
    let cost = evaluate_cost(&p.system, &traj);
    let mut table = Table::new(["k", "time", "gradient", "backward_sum", "forward_sum"]);
    for (i, g) in report.gradient.iter().enumerate() {
        table.push(vec![
            (i + 1).to_string(),
            num(p.schedule.time(i + 1)),
            num(*g),
            num(report.kkt.backward_sums[i]),
            num(report.kkt.forward_sums[i]),
        ]);
    }
    let results = json!({
        "cost": cost.total,
        "gradient": report.gradient,
        "norm": report.norm(),
        "kkt_residual": report.kkt_residual(),
        "coincidence_groups": report.kkt.groups,
        "backward_sums": report.kkt.backward_sums,
        "forward_sums": report.kkt.forward_sums,
    });
    Ok(Output { tables: vec![("gradient.csv", table)], results, code: EXIT_OK })
}

fn check_grad(cfg: &RunConfig, p: &Problem) -> Result<Output, Error> {
    let check =
        check_gradients(&p.system, &p.modes, &p.schedule, &cfg.stepper, &cfg.fd, &cfg.check, cfg.run.execution)?;
    let mut table = Table::new([
        "k",
        "time",
        "adjoint",
        "variational",
        "fd",
        "fd_kind",
        "fd_step",
        "fd_clipped",
        "fd_reliable",
        "err_variational",
        "err_fd",
        "pass",
    ]);
    for r in &check.rows {
        table.push(vec![
            r.k.to_string(),
            num(r.time),
            num(r.adjoint),
            num(r.variational),
            num(r.fd.value),
            label(&r.fd.kind),
            num(r.fd.step),
            r.fd.clipped.to_string(),
            r.fd.reliable.to_string(),
            num(r.err_variational),
            num(r.err_fd),
            (r.pass_variational && r.pass_fd).to_string(),
        ]);
    }
    let max = |f: fn(&crate::gradients::GradientCheckRow) -> f64| check.rows.iter().map(f).fold(0.0, f64::max);
    let results = json!({
        "pass": check.pass,
        "max_err_variational": max(|r| r.err_variational),
        "max_err_fd": max(|r| r.err_fd),
        "unreliable_fd": check.rows.iter().filter(|r| !r.fd.reliable).map(|r| r.k).collect::<Vec<_>>(),
    });
    let code = if check.pass { EXIT_OK } else { EXIT_CHECK_FAILED };
    Ok(Output { tables: vec![("check_grad.csv", table)], results, code })
}

fn insert_scan(cfg: &RunConfig, p: &Problem) -> Result<Output, Error> {
    let horizon = p.system.horizon();
    let times = cfg.scan.times.clone().unwrap_or_else(|| uniform_grid(horizon, cfg.scan.grid));
    let candidates: Vec<ModeIndex> = match &cfg.scan.candidates {
        Some(c) => c.iter().map(|&j| ModeIndex(j)).collect(),
        None => (0..p.system.modes().len()).map(ModeIndex).collect(),
    };
    for &j in &candidates {
        p.system.mode(j).map_err(|e| Error::Config(format!("scan.candidates: {e}")))?;
    }
    let scan = insertion_scan(
        &p.system,
        &p.modes,
        &p.schedule,
        &times,
        &candidates,
        &cfg.stepper,
        &cfg.optimizer.chain,
        cfg.run.execution,
    );
    let mut table = Table::new(["time", "mode", "value", "feasible", "reason"]);
    for e in &scan.entries {
        table.push(vec![
            num(e.time),
            e.mode.to_string(),
            num(e.value),
            e.feasible.to_string(),
            e.reason.clone().unwrap_or_default(),
        ]);
    }
    let best = scan.best().map(|e| json!({ "time": e.time, "mode": e.mode, "value": e.value }));
    let results = json!({
        "best": best,
        "feasible": scan.entries.iter().filter(|e| e.feasible).count(),
        "infeasible": scan.entries.iter().filter(|e| !e.feasible).count(),
    });
    Ok(Output { tables: vec![("insertion_scan.csv", table)], results, code: EXIT_OK })
}

fn optimization_output(trace: &OptimizationTrace) -> Output {
    let mut table = Table::new(["iteration", "action", "cost", "kkt_residual", "step", "modes", "schedule", "gradient"]);
    for r in &trace.records {
        table.push(vec![
            r.iteration.to_string(),
            label(&r.action),
            num(r.cost),
            num(r.kkt_residual),
            num(r.step),
            list(&r.modes),
            list(r.schedule.iter().map(|x| num(*x))),
            list(r.gradient.iter().map(|x| num(*x))),
        ]);
    }
    let results = json!({
        "termination": trace.termination,
        "converged": trace.converged(),
        "iterations": trace.records.len(),
        "final_modes": trace.final_modes,
        "final_schedule": trace.final_schedule,
        "final_cost": trace.final_cost,
        "final_gradient": trace.final_gradient,
        "kkt_residual": trace.kkt_residual,
        "insertions": trace.insertions,
        "removals": trace.removals,
    });
    Output { tables: vec![("trace.csv", table)], results, code: EXIT_OK }
}

/// Parses and validates a configuration file without running anything.
pub fn load_problem(path: &Path) -> Result<(RunConfig, Problem), Error> {
    let (cfg, text) = RunConfig::load_with_text(path)?;
    let problem = cfg.problem().map_err(|e| match e {
        Error::Config(m) => Error::Config(config::annotate_line(&text, &m)),
        other => other,
    })?;
    Ok((cfg, problem))
}
