use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedce_core::commands;
use fedce_core::config::{parse_config, ExperimentConfig};
use fedce_core::{Algorithm, Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fedce", version, about = "Deterministic federated-learning simulator with contribution-weighted aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "fedce.toml")]
    config: PathBuf,

    /// Replaces the config's first seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Aggregation algorithm: fedavg, fedce_multi, fedce_sum or standalone.
    #[arg(long, global = true)]
    algorithm: Option<String>,

    /// Worker threads for parallel client and sub-experiment execution.
    #[arg(long, env = "FEDCE_THREADS", hide = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the configured algorithm and write per-round logs, contributions and checkpoints.
    Run,
    /// Exact Shapley valuation (at most 8 clients) graded against the estimators.
    Shapley,
    /// Leave-one-out valuation graded against the estimators.
    Loo,
    /// Free-rider detection, one federation per free-rider position.
    Freerider,
    /// Shift-robustness check, convergence curves and weight traces.
    Theory,
    /// Fairness report for every configured algorithm.
    Report,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    path: Option<&'a str>,
    message: String,
    exit_code: i32,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } => "config",
        Error::TooManyClients(_) => "too_many_clients",
        Error::Io(_) => "io",
        Error::Numeric(_) | Error::DegenerateExclusion(_) => "numeric",
        _ => "runtime",
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = parse_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seeds[0] = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(name) = &cli.algorithm {
        config.algorithm = name.parse::<Algorithm>().map_err(|e| Error::Config { path: "--algorithm".into(), message: e.to_string() })?;
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config { path: "FEDCE_THREADS".into(), message: e.to_string() })?;
    }
    let config = load(cli)?;
    match cli.command {
        Command::Run => commands::cmd_run(&config),
        Command::Shapley => commands::cmd_shapley(&config),
        Command::Loo => commands::cmd_loo(&config),
        Command::Freerider => commands::cmd_freerider(&config),
        Command::Theory => commands::cmd_theory(&config),
        Command::Report => commands::cmd_report(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let path = match &e {
                Error::Config { path, .. } => Some(path.as_str()),
                _ => None,
            };
            let line = ErrorLine { error: error_kind(&e), path, message: e.to_string(), exit_code: e.exit_code() };
            eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
