use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frk_cli::{run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "frk", version, about = "Fixed-rank spatial prediction for exponential-family data")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate a dataset and its withheld truth
    Simulate(Args),
    /// Fit the model by Laplace-approximated maximum likelihood
    Fit(Args),
    /// Monte Carlo prediction over BAUs or regions
    Predict(Args),
    /// Score predictions against the truth
    Score(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (TOML)
    #[arg(short, long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Fit(a) => (Command::Fit, a),
        Sub::Predict(a) => (Command::Predict, a),
        Sub::Score(a) => (Command::Score, a),
    };
    let outcome = RunConfig::load(&args.config).and_then(|cfg| run(command, &cfg));
    match outcome {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
