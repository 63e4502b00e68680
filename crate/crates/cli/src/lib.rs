//! Orchestration behind the `abh` binary.

pub mod config;
pub mod output;

use std::path::PathBuf;

use abh_core::error::{AbhError, Result};
use abh_core::fd_oracle::{compare, solve_transition, CompareReport, FdSolution};
use abh_core::net::CHECKPOINT_MAGIC;
use abh_core::sampler::lattice;
use abh_core::trainer::{load_state, PinnSolution, TrainState, Trainer, STATE_VERSION};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use config::{Override, RunConfig};
use output::Artifacts;

/// Relative L2 error of consumption tolerated by the comparison verdict.
pub const C_REL_L2_TOL: f64 = 0.20;
/// Pointwise relative capital error tolerated by the comparison verdict.
pub const K_REL_TOL: f64 = 0.15;
/// Comparison window as a fraction of the horizon.
pub const COMPARE_FRACTION: f64 = 0.8;
pub const CHECKPOINT_EVERY: usize = 1000;

#[derive(Debug, Parser)]
#[command(name = "abh", about = "PINN and finite-difference solvers for the ABH transition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration with flat keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Total training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Checkpoint to resume from (solve) or to read (compare, emit).
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the networks.
    Solve,
    /// Solve the transition by finite differences.
    Fd,
    /// Compare a checkpoint with the finite-difference solution.
    Compare {
        /// Compare the finite-difference solution with itself.
        #[arg(long)]
        fd_self: bool,
    },
    /// Re-export paths and slices from a checkpoint.
    Emit,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Fd => "fd",
            Command::Compare { .. } => "compare",
            Command::Emit => "emit",
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &AbhError) -> i32 {
    match e {
        AbhError::Config(_) => 2,
        AbhError::Numeric { .. } | AbhError::Domain { .. } | AbhError::Equilibrium(_) => 3,
        AbhError::NonConvergence { .. } | AbhError::Oracle(_) => 4,
        AbhError::NotFound(_) | AbhError::Io(_) | AbhError::Format(_) => 1,
    }
}

pub fn resolve_config(cli: &Cli) -> Result<(RunConfig, Vec<Override>)> {
    let file = cli.config.as_deref().map(config::read_file).transpose()?.flatten();
    let mut flags = Vec::new();
    if let Some(out) = &cli.out {
        flags.push(("out", json!(out.to_string_lossy())));
    }
    if let Some(seed) = cli.seed {
        flags.push(("seed", json!(seed)));
    }
    if let Some(steps) = cli.steps {
        flags.push(("total_steps", json!(steps)));
    }
    config::build(file.as_ref(), &flags)
}

fn manifest(cfg: &RunConfig, command: Command, out: &Artifacts, extra: Value) -> Value {
    let config = cfg.to_json();
    let hash = output::sha256_hex(config.to_string().as_bytes());
    let files: serde_json::Map<String, Value> = out.files.iter().map(|(n, h)| (n.clone(), json!(h))).collect();
    json!({
        "command": command.name(),
        "config": config,
        "config_sha256": hash,
        "seed": cfg.train.seed,
        "formats": {
            "state": STATE_VERSION,
            "network": String::from_utf8_lossy(CHECKPOINT_MAGIC),
            "csv": output::CSV_SCHEMA_VERSION,
        },
        "artifacts": files,
        "details": extra,
    })
}

fn finish(cfg: &RunConfig, command: Command, mut out: Artifacts, extra: Value) -> Result<()> {
    let m = manifest(cfg, command, &out, extra);
    output::write_json(&mut out, "manifest.json", &m)
}

fn checkpoint_path(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.resume.clone().unwrap_or_else(|| cfg.out.join("state_final.bin"))
}

fn write_pinn(out: &mut Artifacts, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    let sol = PinnSolution::from_state(&cfg.model, state, cfg.train.execution)?;
    out.write("losses.csv", output::losses_csv(&state.history).as_bytes())?;
    output::write_solution(out, &cfg.model, &sol, &state.path.t_nodes)
}

fn solve(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let mut out = Artifacts::new(&cfg.out)?;
    let mut trainer = match &cli.resume {
        Some(p) => Trainer::from_state(cfg.model.clone(), cfg.train.clone(), load_state(p)?)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let start = trainer.state().step;
    let dir = cfg.out.clone();
    let result = trainer.train(|state| {
        if state.step % CHECKPOINT_EVERY == 0 {
            abh_core::trainer::save_state(state, &dir.join(format!("state_step{}.bin", state.step)))?;
            let last = state.history.last().map(|l| l.total).unwrap_or(f64::NAN);
            let kt = state.path.k.last().copied().unwrap_or(f64::NAN);
            eprintln!("step {} loss {last:.4e} K(T) {kt:.4}", state.step);
        }
        Ok(())
    });
    // Keep the loss history of a failed run.
    out.write("losses.csv", output::losses_csv(&trainer.state().history).as_bytes())?;
    result?;
    let state = trainer.into_state();
    out.write("state_final.bin", &state.to_bytes())?;
    write_pinn(&mut out, cfg, &state)?;
    finish(cfg, Command::Solve, out, json!({ "resumed_from_step": start, "steps": state.step }))
}

fn fd_summary(sol: &FdSolution) -> Value {
    json!({
        "outer_iterations": sol.outer_iterations,
        "residual_history": sol.residual_history,
        "max_mass_drift": sol.max_mass_drift,
        "monotone_fraction": sol.monotone_fraction(),
        "concave_fraction": sol.concave_fraction(),
        "upwind_consistent_fraction": sol.upwind_consistent_fraction(),
        "k_path": sol.k_path,
        "r_path": sol.r_path,
    })
}

fn fd(cfg: &RunConfig) -> Result<()> {
    let mut out = Artifacts::new(&cfg.out)?;
    let sol = solve_transition(&cfg.model, &cfg.fd_grid, None, &cfg.fd)?;
    let t_nodes = lattice(0.0, cfg.model.horizon, cfg.train.time_nodes);
    output::write_solution(&mut out, &cfg.model, &sol, &t_nodes)?;
    let summary = fd_summary(&sol);
    output::write_json(&mut out, "fd_summary.json", &summary)?;
    finish(cfg, Command::Fd, out, json!({ "outer_iterations": sol.outer_iterations }))
}

/// Comparison report with its verdicts.
pub fn report_json(rep: &CompareReport) -> Value {
    let finite = [rep.rel_l2_v, rep.rel_l2_c, rep.rel_l2_g, rep.k_abs_max, rep.r_abs_max]
        .iter()
        .all(|x| x.is_finite());
    json!({
        "errors": rep,
        "tolerances": { "c_rel_l2": C_REL_L2_TOL, "k_rel_max": K_REL_TOL },
        "verdicts": {
            "c_rel_l2": rep.rel_l2_c < C_REL_L2_TOL,
            "k_rel_max": rep.k_rel_max < K_REL_TOL,
            "finite": finite,
        },
    })
}

fn compare_cmd(cli: &Cli, cfg: &RunConfig, fd_self: bool) -> Result<()> {
    let state = if fd_self { None } else { Some(load_state(&checkpoint_path(cli, cfg))?) };
    let mut out = Artifacts::new(&cfg.out)?;
    let oracle = solve_transition(&cfg.model, &cfg.fd_grid, None, &cfg.fd)?;
    let t_cut = COMPARE_FRACTION * cfg.model.horizon;
    let rep = match &state {
        Some(s) => compare(&oracle, &PinnSolution::from_state(&cfg.model, s, cfg.train.execution)?, t_cut)?,
        None => compare(&oracle, &oracle, t_cut)?,
    };
    let mut body = report_json(&rep);
    body["pinn_step"] = json!(state.as_ref().map(|s| s.step));
    body["fd_outer_iterations"] = json!(oracle.outer_iterations);
    output::write_json(&mut out, "compare_report.json", &body)?;
    finish(cfg, Command::Compare { fd_self }, out, json!({ "fd_self": fd_self }))
}

fn emit(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let path = checkpoint_path(cli, cfg);
    let state = load_state(&path)?;
    let mut out = Artifacts::new(&cfg.out)?;
    write_pinn(&mut out, cfg, &state)?;
    finish(cfg, Command::Emit, out, json!({ "checkpoint": path, "step": state.step }))
}

pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, overrides) = resolve_config(cli)?;
    for o in &overrides {
        eprintln!("{o}");
    }
    match cli.command {
        Command::Solve => solve(cli, &cfg),
        Command::Fd => fd(&cfg),
        Command::Compare { fd_self } => compare_cmd(cli, &cfg, fd_self),
        Command::Emit => emit(cli, &cfg),
    }
}

