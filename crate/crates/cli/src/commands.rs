use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use bdsde::grid_noise::walk_values;
use bdsde::montecarlo::{convergence_study, estimate, write_convergence_csv, write_mc_csv};
use bdsde::oracle::{exact_solution, oracle_suite};
use bdsde::picard::{diagnostics_rows, picard_solve, PicardOptions};
use bdsde::spde::{
    backward_noise_term, linspace, u_surface, write_surface_csv, ForwardSpec, Volatility,
};
use bdsde::table;
use bdsde::tree_solver::{write_tree_csv, SolveOptions};
use bdsde::{
    builtin, make_grid, sample_path, solve_with_scheme, validate_spec, TimeGrid, ValidatedSpec,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Mc,
    Convergence,
    PicardDiagnose,
    Spde,
    OracleCheck,
    Paths,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Mc => "mc",
            Command::Convergence => "convergence",
            Command::PicardDiagnose => "picard-diagnose",
            Command::Spde => "spde",
            Command::OracleCheck => "oracle-check",
            Command::Paths => "paths",
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    /// Bad configuration; exit status 2.
    Usage(anyhow::Error),
    /// A run that started and failed; exit status 1.
    Failed(anyhow::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Usage(e) => write!(f, "usage error: {e:#}"),
            RunError::Failed(e) => write!(f, "run failed: {e:#}"),
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Failed(_) => 1,
        }
    }
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// A check failed or some samples failed to solve.
    pub failed: bool,
    /// Printed on stdout by the binary.
    pub summary: Value,
}

fn usage<E: Into<anyhow::Error>>(e: E) -> RunError {
    RunError::Usage(e.into())
}

fn failed<E: Into<anyhow::Error>>(e: E) -> RunError {
    RunError::Failed(e.into())
}

type RunResult<T> = std::result::Result<T, RunError>;

struct Setup {
    grid: TimeGrid,
    spec: ValidatedSpec,
}

fn setup(cfg: &ExperimentConfig) -> RunResult<Setup> {
    let grid = make_grid(cfg.horizon, cfg.n).map_err(usage)?;
    let spec = builtin(&cfg.model).map_err(usage)?;
    let spec = validate_spec(&spec, &grid).map_err(usage)?;
    Ok(Setup { grid, spec })
}

/// Writes `name` and its metadata sidecar `name.meta.json`.
struct Writer<'a> {
    cfg: &'a ExperimentConfig,
    command: Command,
    artifacts: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(cfg: &'a ExperimentConfig, command: Command) -> RunResult<Self> {
        fs::create_dir_all(&cfg.out)
            .with_context(|| format!("creating {}", cfg.out.display()))
            .map_err(usage)?;
        Ok(Self {
            cfg,
            command,
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> RunResult<()> {
        let path = self.cfg.out.join(name);
        fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(failed)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> RunResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
        extra: Value,
    ) -> RunResult<()> {
        let mut buf = Vec::new();
        body(&mut buf).map_err(failed)?;
        self.write(name, &buf)?;
        let meta = json!({
            "command": self.command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "config": self.cfg,
            "result": extra,
        });
        self.json(&format!("{name}.meta.json"), &meta)
    }

    fn finish(self, failed: bool, summary: Value) -> Outcome {
        Outcome {
            artifacts: self.artifacts,
            failed,
            summary,
        }
    }
}

/// Runs one subcommand; artifacts land in `cfg.out`.
pub fn run(command: Command, cfg: &ExperimentConfig) -> RunResult<Outcome> {
    cfg.validate().map_err(usage)?;
    log::info!(
        "{} with model {} (seed {})",
        command.name(),
        cfg.model,
        cfg.seed
    );
    match command {
        Command::Solve => solve(cfg),
        Command::Mc => mc(cfg),
        Command::Convergence => convergence(cfg),
        Command::PicardDiagnose => picard(cfg),
        Command::Spde => spde(cfg),
        Command::OracleCheck => oracle_check(cfg),
        Command::Paths => paths(cfg),
    }
}

fn solve(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let Setup { grid, spec } = setup(cfg)?;
    let path = sample_path(&grid, cfg.seed);
    let opts = SolveOptions {
        keep_tree: cfg.keep_tree,
        tol: cfg.tol,
        max_iterations: cfg.max_iterations,
        terminal_z: cfg.terminal_z_mode().map_err(usage)?,
    };
    let report = solve_with_scheme(cfg.scheme, &spec, &grid, &path.eps, &opts).map_err(failed)?;
    let exact_y0 = match spec.exact {
        Some(model) => Some(exact_solution(model, &grid, &path).map_err(failed)?.y_path[0]),
        None => None,
    };
    let summary = json!({
        "model": spec.name,
        "scheme": report.scheme,
        "T": cfg.horizon,
        "n": cfg.n,
        "seed": cfg.seed,
        "y0": report.y0,
        "z0": report.z0,
        "fixed_point_iterations": report.fixed_point_iterations,
        "residual": report.residual,
        "exact_y0": exact_y0,
        "abs_error": exact_y0.map(|e| (report.y0 - e).abs()),
    });
    let mut w = Writer::new(cfg, Command::Solve)?;
    w.json("solve.json", &summary)?;
    if let Some(levels) = &report.levels {
        w.csv(
            "solve_tree.csv",
            |b| write_tree_csv(b, levels, &grid, report.scheme),
            summary.clone(),
        )?;
    }
    Ok(w.finish(false, summary))
}

fn mc(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let Setup { grid, spec } = setup(cfg)?;
    let report = estimate(&spec, &grid, cfg.samples, cfg.seed, cfg.scheme).map_err(failed)?;
    let summary = serde_json::to_value(&report).map_err(failed)?;
    let mut w = Writer::new(cfg, Command::Mc)?;
    w.csv(
        "mc.csv",
        |b| write_mc_csv(b, std::slice::from_ref(&report)),
        summary.clone(),
    )?;
    Ok(w.finish(report.failures > 0, summary))
}

fn convergence(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let spec = builtin(&cfg.model).map_err(usage)?;
    for &n in &cfg.n_list {
        let grid = make_grid(cfg.horizon, n).map_err(usage)?;
        validate_spec(&spec, &grid).map_err(usage)?;
    }
    let table = convergence_study(&spec, cfg.horizon, &cfg.n_list, cfg.samples, cfg.seed)
        .map_err(failed)?;
    let summary = json!({
        "model": spec.name,
        "metric": table.metric,
        "slope": table.slope,
        "rows": table.rows,
    });
    let mut w = Writer::new(cfg, Command::Convergence)?;
    w.csv(
        "convergence.csv",
        |b| write_convergence_csv(b, &table),
        summary.clone(),
    )?;
    let bad = table.rows.iter().any(|r| !r.error.is_finite());
    Ok(w.finish(bad, summary))
}

fn picard(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let Setup { grid, spec } = setup(cfg)?;
    let eps = sample_path(&grid, cfg.seed).eps;
    let opts = PicardOptions {
        p_max: cfg.p_max,
        tol: cfg.picard_tol,
        gamma: cfg.gamma,
        ..PicardOptions::default()
    };
    let out = picard_solve(&spec, &grid, &eps, &opts).map_err(failed)?;
    let root = &out.iterate.levels[0];
    let summary = json!({
        "model": spec.name,
        "gamma": out.diagnostics.gamma,
        "delta": out.diagnostics.delta,
        "converged_at": out.converged_at,
        "y0": root.y[0],
        "z0": root.z[0],
        "norms_unit_weight": out.diagnostics.norms_unit_weight,
    });
    let rows = diagnostics_rows(&out.diagnostics);
    let mut w = Writer::new(cfg, Command::PicardDiagnose)?;
    w.csv(
        "picard.csv",
        |b| table::write_csv(b, &["p", "norm_sq", "ratio"], &rows),
        summary.clone(),
    )?;
    Ok(w.finish(false, summary))
}

fn spde(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let Setup { grid, spec } = setup(cfg)?;
    let fwd = ForwardSpec {
        drift: (cfg.drift_b0, cfg.drift_b1),
        volatility: Volatility::Constant(cfg.sigma),
        h: cfg.forward_terminal().map_err(usage)?,
    };
    let eps = sample_path(&grid, cfg.seed).eps;
    let xs = linspace(cfg.x_min, cfg.x_max, cfg.x_points);
    let surface = u_surface(&fwd, &spec, &grid, &xs, &eps, cfg.seed.to_string()).map_err(failed)?;
    let summary = json!({
        "model": spec.name,
        "h": cfg.h,
        "sigma": cfg.sigma,
        "backward_noise_term": backward_noise_term(&eps, &grid),
        "points": surface.u.len(),
    });
    let mut w = Writer::new(cfg, Command::Spde)?;
    w.csv(
        "surface.csv",
        |b| write_surface_csv(b, &surface),
        summary.clone(),
    )?;
    Ok(w.finish(false, summary))
}

fn oracle_check(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let records = oracle_suite();
    let failures: Vec<&str> = records
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.claim.as_str())
        .collect();
    for claim in &failures {
        log::error!("oracle check failed: {claim}");
    }
    let summary = json!({
        "checks": records.len(),
        "failed": failures,
    });
    let mut w = Writer::new(cfg, Command::OracleCheck)?;
    w.json(
        "oracle.json",
        &json!({ "version": env!("CARGO_PKG_VERSION"), "records": records }),
    )?;
    let any_failed = !failures.is_empty();
    Ok(w.finish(any_failed, summary))
}

fn paths(cfg: &ExperimentConfig) -> RunResult<Outcome> {
    let grid = make_grid(cfg.horizon, cfg.n).map_err(usage)?;
    let path = sample_path(&grid, cfg.seed);
    let walks = walk_values(&path, &grid).map_err(failed)?;
    let rows: Vec<Vec<String>> = grid
        .times()
        .iter()
        .zip(walks.w.iter().zip(walks.backward_increments()))
        .map(|(t, (w, b))| vec![table::float(*t), table::float(*w), table::float(b)])
        .collect();
    let summary = json!({
        "T": cfg.horizon,
        "n": cfg.n,
        "W_T": walks.w[cfg.n],
        "B_T": walks.b[cfg.n],
    });
    let mut w = Writer::new(cfg, Command::Paths)?;
    w.csv(
        "paths.csv",
        |b| table::write_csv(b, &["t", "W", "B_rev"], &rows),
        summary.clone(),
    )?;
    Ok(w.finish(false, summary))
}

/// Record left behind when a run fails after it started.
pub fn write_failure(out: &Path, command: Command, err: &RunError) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join("failure.json");
    let record = json!({
        "command": command.name(),
        "exit_code": err.exit_code(),
        "error": err.to_string(),
    });
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
        .map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
    Ok(path)
}
