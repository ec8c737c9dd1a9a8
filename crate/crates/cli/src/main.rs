use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use contact_hj_cli::{run, Experiment, Overrides, RunError};

/// Runs one experiment described by a TOML config (or a run manifest).
#[derive(Parser, Debug)]
#[command(name = "contact-hj", version)]
struct Args {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for the per-node loops.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Seed, overriding the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Experiment; the config's `experiment` field wins on conflict.
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("configuration error: --workers {n}: {e}");
            return ExitCode::from(1);
        }
    }
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        experiment: args.experiment,
    };
    match run(&args.config, &overrides) {
        Ok(summary) => {
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            for f in &summary.falsified {
                eprintln!("FALSIFIED {f}");
            }
            println!(
                "{} finished: {} files in {}",
                summary.experiment,
                summary.files.len(),
                summary.output_dir.display()
            );
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e @ RunError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(RunError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
