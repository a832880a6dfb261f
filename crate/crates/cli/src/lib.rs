//! Command-line pipeline over `frk-core`: simulate data, fit, predict and
//! score, driven by one TOML config.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod plot;

pub use commands::{cmd_fit, cmd_predict, cmd_score, cmd_simulate};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Predict,
    Score,
}

pub fn run(command: Command, cfg: &RunConfig) -> CliResult<String> {
    match command {
        Command::Simulate => cmd_simulate(cfg),
        Command::Fit => cmd_fit(cfg),
        Command::Predict => cmd_predict(cfg),
        Command::Score => cmd_score(cfg),
    }
}
