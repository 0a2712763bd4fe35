//! Thin command-line front end over the experiment pipeline.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures (training divergence, I/O problems).

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use mte_lab::experiment::{compare_reports, run_experiment, validate_config};
use mte_lab::Error;

#[derive(Parser)]
#[command(name = "mte-lab", version, about = "Calibrated-classifier co-training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config and write report files.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge two or more report.json files into one comparison CSV.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, required = true)]
        out: PathBuf,
    },
    /// Check a config file against the schema without running anything.
    Validate { config: PathBuf },
}

fn failure_code(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSpec(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => {
            run_experiment(&config, seed, out.as_deref()).map(|(report, dir)| {
                println!(
                    "wrote {} method report(s) to {}",
                    report.methods.len(),
                    dir.display()
                );
            })
        }
        Command::Compare { reports, out } => compare_reports(&reports, &out)
            .map(|()| println!("wrote comparison to {}", out.display())),
        Command::Validate { config } => match validate_config(&config) {
            Ok((_, problems)) if problems.is_empty() => {
                println!("ok");
                Ok(())
            }
            Ok((_, problems)) => {
                for p in &problems {
                    eprintln!("error: {p}");
                }
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            failure_code(&e)
        }
    }
}
