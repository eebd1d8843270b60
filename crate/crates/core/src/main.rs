use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pmisc::experiment::{compare_runs, exit_code, run_experiment, Overrides, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "pmisc", version, about = "Multi-index stochastic collocation with spectral plateau detection")]
struct Cli {
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Defaults to the config's `output_dir`, then to
        /// `$PMISC_OUTPUT_ROOT/<config stem>`, then `output/<config stem>`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Align the error tables of two runs and write comparison.csv.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Where comparison.csv goes; defaults to `$PMISC_OUTPUT_ROOT`, then
        /// the current directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run { config, output_dir, seed_override } => {
            run_experiment(&config, &Overrides { output_dir, seed: seed_override }).map(|dir| {
                if !cli.quiet {
                    println!("outputs written to {}", dir.display());
                }
            })
        }
        Command::Compare { dir_a, dir_b, output_dir } => {
            let out = output_dir
                .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            compare_runs(&dir_a, &dir_b, &out).map(|rows| {
                if !cli.quiet {
                    println!("{:>14} {:>12} {:>12} {:>10}", "cost", "l2_a", "l2_b", "l2_ratio");
                    for r in rows {
                        println!("{:>14.6e} {:>12.4e} {:>12.4e} {:>10.4}", r.cost, r.a[0], r.b[0], r.ratios()[0]);
                    }
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
