//! `occtrack`: synthesize data, train, track, evaluate and run ablations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use occtrack_core::Error;

#[derive(Parser, Debug)]
#[command(name = "occtrack", version, about = "Occlusion-robust single-object tracking")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-sequence tracking and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into `--out`.
    Synth,
    /// Train on a dataset directory; checkpoints go to `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track one sequence directory or every sequence under a dataset directory.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
    },
    /// Score tracking CSVs against ground truth.
    Eval {
        /// Directory of `<sequence>.csv` files written by `track`.
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
    },
    /// λ sweep and loss ablation on a held-out synthetic set.
    Ablate {
        /// Training data for checkpoints that do not exist yet.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint for the λ sweep; defaults to the both-losses variant.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Diverged(_) | Error::NonFinite(_) => 4,
        Error::Shape(_) | Error::Sampling(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref())
        .map(|c| match cli.seed {
            Some(s) => c.with_seed(s),
            None => c,
        })
        .and_then(|cfg| {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
            let ctx = commands::Context { cfg, out, jobs: cli.jobs };
            match &cli.command {
                Command::Synth => commands::synth(&ctx),
                Command::Train { data, resume } => commands::train(&ctx, data, resume.as_deref()),
                Command::Track { checkpoint, sequences } => commands::track(&ctx, checkpoint, sequences),
                Command::Eval { tracks, sequences } => commands::eval(&ctx, tracks, sequences),
                Command::Ablate { data, checkpoint } => commands::ablate(&ctx, data, checkpoint.as_deref()),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
