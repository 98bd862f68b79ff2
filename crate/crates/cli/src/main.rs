use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradinv::labels::Rule;
use gradinv::Error;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "gradinv", version, about = "Recover training images from a shared batch gradient")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Builds a victim model and batch, and writes the gradient bundle plus a
    /// separate ground-truth file next to it.
    GenVictim {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bundle path; the ground truth goes to the same path with a
        /// `.truth` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the labels restored from a bundle.
    Labels {
        bundle: PathBuf,
        /// Number of labels; defaults to the bundle's batch size.
        #[arg(short)]
        k: Option<usize>,
        #[arg(long, default_value = "min")]
        rule: Rule,
        /// Ground truth to score the restored labels against.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Runs the inversion and writes a report directory.
    Attack {
        bundle: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a report directory against the ground truth and writes
    /// `metrics.txt`.
    Eval {
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn run(cli: Cli) -> gradinv::Result<()> {
    match cli.command {
        Command::GenVictim { config, out } => {
            let c = config::RunConfig::load(config.config.as_deref(), &config.set, config.seed)?;
            commands::gen_victim(&c, &out)
        }
        Command::Labels { bundle, k, rule, truth } => commands::labels(&bundle, k, rule, truth.as_deref()),
        Command::Attack { bundle, config, out } => {
            let c = config::RunConfig::load(config.config.as_deref(), &config.set, config.seed)?;
            commands::attack(&bundle, &c, &out)
        }
        Command::Eval { report, truth } => commands::eval(&report, &truth),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
