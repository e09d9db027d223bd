use std::path::PathBuf;
use std::process::ExitCode;

use bdsde_cli::commands::write_failure;
use bdsde_cli::{run, Command, ExperimentConfig, RunError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bdsde",
    version,
    about = "Backward doubly stochastic DE experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve along one sampled backward path
    Solve(Flags),
    /// Monte Carlo statistics of the root value
    Mc(Flags),
    /// Error table over a list of step counts
    Convergence(Flags),
    /// Picard iteration with contraction diagnostics
    PicardDiagnose(Flags),
    /// Random-field surface u(0, x)
    Spde(Flags),
    /// Run the oracle invariant suite
    OracleCheck(Flags),
    /// Sampled walk paths (t, W_t, B_T - B_t)
    Paths(Flags),
}

/// Every flag overrides the key of the same name in `--config`.
#[derive(Args, Default)]
struct Flags {
    /// Flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long = "T")]
    horizon: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    n_list: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    terminal_z: Option<String>,
    #[arg(long)]
    keep_tree: bool,
    #[arg(long)]
    p_max: Option<String>,
    #[arg(long)]
    picard_tol: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    x_min: Option<String>,
    #[arg(long)]
    x_max: Option<String>,
    #[arg(long)]
    x_points: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    drift_b0: Option<String>,
    #[arg(long)]
    drift_b1: Option<String>,
    #[arg(long)]
    h: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
}

impl Flags {
    fn into_config(self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let overrides = [
            ("model", self.model),
            ("T", self.horizon),
            ("n", self.n),
            ("n_list", self.n_list),
            ("scheme", self.scheme),
            ("samples", self.samples),
            ("seed", self.seed),
            ("tol", self.tol),
            ("max_iterations", self.max_iterations),
            ("terminal_z", self.terminal_z),
            ("p_max", self.p_max),
            ("picard_tol", self.picard_tol),
            ("gamma", self.gamma),
            ("x_min", self.x_min),
            ("x_max", self.x_max),
            ("x_points", self.x_points),
            ("sigma", self.sigma),
            ("drift_b0", self.drift_b0),
            ("drift_b1", self.drift_b1),
            ("h", self.h),
            ("out", self.out),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                cfg.set(key, &value)?;
            }
        }
        if self.keep_tree {
            cfg.keep_tree = true;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Sub::Solve(f) => (Command::Solve, f),
        Sub::Mc(f) => (Command::Mc, f),
        Sub::Convergence(f) => (Command::Convergence, f),
        Sub::PicardDiagnose(f) => (Command::PicardDiagnose, f),
        Sub::Spde(f) => (Command::Spde, f),
        Sub::OracleCheck(f) => (Command::OracleCheck, f),
        Sub::Paths(f) => (Command::Paths, f),
    };
    let cfg = match flags.into_config() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("usage error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(command, &cfg) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.summary).unwrap_or_default()
            );
            if outcome.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            eprintln!("{err}");
            if let RunError::Failed(_) = err {
                if let Err(e) = write_failure(&cfg.out, command, &err) {
                    eprintln!("could not write failure record: {e:#}");
                }
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
