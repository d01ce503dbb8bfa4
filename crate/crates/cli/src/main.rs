//! Command-line front end: run, validate, and introspect scenario files.
//!
//! Exit codes: 0 when every selected check passed (or the command has
//! nothing to check), 1 when the scenario ran but some check failed,
//! 2 on any error (bad config, solver failure, I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zvonkin_core::scenario::{self, Overrides};

#[derive(Parser)]
#[command(
    name = "zvonkin",
    version,
    about = "Regularization pipeline for SDEs with singular drift",
    long_about = "Truncates a coefficient field, solves the drifted resolvent equation, \
builds the regularizing diffeomorphism, simulates the transformed dynamics, and \
checks the configured empirical bounds. One TOML file describes one scenario."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file end to end and write its artifacts.
    Run {
        /// Scenario TOML file.
        config: PathBuf,
        /// Override the simulation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap the worker-thread count (results are identical either way).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and validate a scenario file without running anything.
    Validate {
        /// Scenario TOML file.
        config: PathBuf,
    },
    /// Print the catalog of coefficient presets, test functions, and
    /// estimators as stable tab-separated lines.
    ListPresets,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListPresets => {
            print!("{}", scenario::list_presets());
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match scenario::load_config(&config) {
            Ok(cfg) => {
                println!("ok: scenario `{}` is valid", cfg.name);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            if let Some(t) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                    eprintln!("error: could not size the thread pool: {e}");
                    return ExitCode::from(2);
                }
            }
            let overrides = Overrides {
                seed,
                out_dir: out,
            };
            match scenario::run_scenario_file(&config, &overrides) {
                Ok(outcome) => {
                    for w in &outcome.map_warnings {
                        eprintln!("warning: {w}");
                    }
                    if let Ok(summary) =
                        std::fs::read_to_string(outcome.out_dir.join("summary.txt"))
                    {
                        print!("{summary}");
                    }
                    println!("artifacts: {}", outcome.out_dir.display());
                    if outcome.all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
