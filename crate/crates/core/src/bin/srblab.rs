use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srblab::cli::{configure_threads, list_builtins, run, ExperimentConfig};

/// Numerical experiments on SRB measures and linear response.
#[derive(Parser)]
#[command(name = "srblab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List families, observables and experiments with their parameters.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match cli.command {
        Command::List => {
            print!("{}", list_builtins());
            ExitCode::SUCCESS
        }
        Command::Run { config, seed, out } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: invalid config {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            match run(&cfg, seed, out.as_deref()) {
                Ok(outcome) => {
                    for entry in &outcome.manifest {
                        println!("{}\t{}\t{}", outcome.output_dir.join(&entry.file).display(), entry.size, entry.sha256);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
