//! Command-line pipeline: validate inputs, fit the model, build Q-matrices
//! and write decision reports, all driven by one TOML run configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::io::Write;

use anyhow::Context;

pub use commands::{CliError, Issue, ValidationReport, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
pub use config::{Overrides, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Fit,
    Qmatrix,
    Report,
    Simulate,
    Diagnose,
    /// fit, qmatrix and report in sequence.
    Run,
}

/// Runs `command` on a thread pool sized by `cfg.threads` and returns the
/// number of warnings raised.
pub fn execute(
    command: Command,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<usize, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("starting worker threads")?;
    pool.install(|| match command {
        Command::Validate => commands::cmd_validate(cfg, out),
        Command::Fit => commands::cmd_fit(cfg, out),
        Command::Qmatrix => commands::cmd_qmatrix(cfg, out),
        Command::Report => commands::cmd_report(cfg, out),
        Command::Simulate => commands::cmd_simulate(cfg, out),
        Command::Diagnose => commands::cmd_diagnose(cfg, out),
        Command::Run => commands::cmd_run(cfg, out),
    })
}
