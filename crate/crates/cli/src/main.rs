use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use povmap_cli::{execute, CliError, Command, Issue, Overrides, RunConfig, ValidationReport};

/// Small-area poverty mapping with a hierarchical Bayes model.
#[derive(Debug, Parser)]
#[command(name = "povmap", version, about)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores), overriding the configuration.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Check the configuration and input files; prints every problem as JSON.
    Validate,
    /// Run the MCMC chains; writes draws.csv, fit_meta.json and psrf.csv.
    Fit,
    /// Evaluate FGT indices at every draw; writes qmatrix_alpha*.csv.
    Qmatrix,
    /// Point estimates, exceedance flags and extreme-area probabilities.
    Report,
    /// Generate a synthetic region with known truth.
    Simulate,
    /// Posterior summaries and R-hat from stored draws.
    Diagnose,
    /// fit, qmatrix and report in one go.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Validate => Command::Validate,
        Cmd::Fit => Command::Fit,
        Cmd::Qmatrix => Command::Qmatrix,
        Cmd::Report => Command::Report,
        Cmd::Simulate => Command::Simulate,
        Cmd::Diagnose => Command::Diagnose,
        Cmd::Run => Command::Run,
    };
    let loaded = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => RunConfig::from_toml("", std::path::Path::new(".")),
    };
    let mut cfg = match loaded {
        Ok(cfg) => cfg,
        Err(message) => {
            return report_failure(CliError::Validation(ValidationReport::from_issues(vec![
                Issue::config(message),
            ])))
        }
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        threads: cli.threads,
    });
    let mut stdout = std::io::stdout();
    match execute(command, &cfg, &mut stdout) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => report_failure(e),
    }
}

fn report_failure(e: CliError) -> ExitCode {
    if let CliError::Validation(report) = &e {
        let _ = writeln!(std::io::stdout(), "{}", report.to_json());
    }
    error!("{e}");
    ExitCode::from(e.exit_code() as u8)
}
