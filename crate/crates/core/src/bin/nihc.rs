use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use nihc::harness::{cmd_evaluate, cmd_generate, cmd_reconstruct, cmd_report, cmd_train, ExperimentConfig, StageOutcome};

#[derive(Parser)]
#[command(name = "nihc", version, about = "Biventricular shape reconstruction from sparse labeled slices")]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration entry, e.g. --set epochs=50
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Output root (also settable through NIHC_OUT)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the cohort and the test slices
    Generate {
        /// Overwrite an existing cohort
        #[arg(long)]
        force: bool,
    },
    /// Train the networks and latent codes
    Train {
        /// Continue from the last checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Fit latent codes to the test slices
    Reconstruct,
    /// Score reconstructions against the generating shapes
    Evaluate,
    /// Write report.md from the evaluation outputs
    Report,
    /// Run every stage in order
    All {
        #[arg(long)]
        force: bool,
    },
}

fn finish(stage: &str, outcome: StageOutcome) -> bool {
    for p in &outcome.problems {
        eprintln!("{stage}: {p}");
    }
    let secs = outcome.manifest.durations.get(stage).copied().unwrap_or(0.0);
    eprintln!("{stage}: {} artifacts in {secs:.1} s", outcome.manifest.artifacts.len());
    outcome.problems.is_empty()
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut config = ExperimentConfig::load(cli.config.as_deref(), &cli.set).context("loading configuration")?;
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    let progress = |msg: &str| eprintln!("{msg}");
    let ok = match cli.command {
        Command::Generate { force } => finish("generate", cmd_generate(&config, force)?),
        Command::Train { resume } => finish("train", cmd_train(&config, resume, &progress)?),
        Command::Reconstruct => finish("reconstruct", cmd_reconstruct(&config, &progress)?),
        Command::Evaluate => finish("evaluate", cmd_evaluate(&config, &progress)?),
        Command::Report => {
            print!("{}", cmd_report(&config)?);
            true
        }
        Command::All { force } => {
            let mut ok = finish("generate", cmd_generate(&config, force)?);
            ok &= finish("train", cmd_train(&config, false, &progress)?);
            ok &= finish("reconstruct", cmd_reconstruct(&config, &progress)?);
            ok &= finish("evaluate", cmd_evaluate(&config, &progress)?);
            print!("{}", cmd_report(&config)?);
            ok
        }
    };
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
