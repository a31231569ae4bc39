use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::experiment::{generate_data, report, run_experiment, ExperimentConfig};
use fedsim::FlError;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Train participants in parallel. Outputs are unchanged.
        #[arg(long)]
        parallel: bool,
    },
    /// Summarize a finished run and write summary.json.
    Report { dir: PathBuf },
    /// Generate a synthetic federation and save it as CSV files.
    GenerateData { config: PathBuf, dir: PathBuf },
}

fn exit_code(err: &FlError) -> u8 {
    match err {
        FlError::Config(_) | FlError::Parse { .. } | FlError::Schema { .. } => 2,
        FlError::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), FlError> {
    match cli.command {
        Command::Run { config, seed, rounds, output_dir, parallel } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = rounds {
                cfg.hyperparams.rounds = r;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let info = run_experiment(&cfg, parallel)?;
            for w in &info.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: {} of {} rounds, results in {}",
                info.strategy,
                info.rounds_completed,
                info.rounds_requested,
                cfg.output_dir.display()
            );
        }
        Command::Report { dir } => {
            let (_, text) = report(&dir)?;
            print!("{text}");
        }
        Command::GenerateData { config, dir } => {
            let text = fs::read_to_string(&config).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => FlError::MissingArtifact(config.display().to_string()),
                _ => FlError::Io(e),
            })?;
            let fed = generate_data(&text, &dir)?;
            println!("wrote {} clients to {}", fed.clients.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
