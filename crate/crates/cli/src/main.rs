//! `lvqa`: corpus synthesis, dataset building, staged training, generation,
//! evaluation and ablation sweeps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lvqa_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "lvqa", version, about = "Longitudinal chest X-ray difference question answering")]
pub struct Cli {
    /// Seed for generation and training; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Computation is single-threaded and deterministic at
    /// any setting.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Floating point width used for training and inference.
    #[arg(long, global = true, value_enum, default_value = "32")]
    pub precision: Precision,
    /// TOML stage configuration (train, ablate).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write into a non-empty output location.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal corpus.
    Synth {
        #[arg(long)]
        patients: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_visits: usize,
        #[arg(long, default_value_t = 4)]
        max_visits: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Build stage datasets and the vocabulary from a corpus.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        vocab_size: usize,
        #[arg(long, default_value_t = 3)]
        min_word_count: usize,
    },
    /// Train one stage; writes best.ckpt, log.csv and the resolved config.
    Train {
        /// Stage number; defaults to the config's `stage`.
        #[arg(long)]
        stage: Option<u8>,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dotted overrides such as `optimizer.lr=0.0005`.
        overrides: Vec<String>,
    },
    /// Write generated answers for a dataset file as JSONL.
    Generate {
        #[command(flatten)]
        input: commands::InferenceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate answers and score them.
    Evaluate {
        #[command(flatten)]
        input: commands::InferenceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pretraining (2) or stage-2 input (3) ablation rows.
    Ablate {
        #[arg(long)]
        table: u8,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        /// Dotted overrides for every stage, or `stageN.key=value` for one.
        overrides: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
