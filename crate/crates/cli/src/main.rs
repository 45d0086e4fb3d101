//! `codavamp`: corpus synthesis, tokenizer and token-model training,
//! adaptation, translation and evaluation from one binary.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use codavamp_core::ErrorKind;
use serde::Serialize;

use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<codavamp_core::Error> for CliError {
    fn from(e: codavamp_core::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "codavamp", version, about = "Masked acoustic token modeling for click-train audio")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed every random stream is derived from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 for strict reproducibility checks).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root of all artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Domain,
    Species,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Domain => "domain",
            Phase::Species => "species",
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic corpus into <out-dir>/corpus.
    Synth,
    /// Fit the tokenizer on the training split.
    TrainCodec {
        /// Corpus directory or WAV folder (default <out-dir>/corpus).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the masked token model on tokenized audio.
    TrainMatm {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a LoRA adapter: `domain` on the base model, `species` on top of the merged domain adapter.
    Finetune {
        #[arg(long, value_enum)]
        phase: Phase,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-generate audio as the trained domain, keeping onsets and periodic columns.
    Translate {
        /// WAV file or directory of WAVs.
        #[arg(long)]
        input: PathBuf,
        /// Prompt preset name, e.g. codas, beeps, walrus.
        #[arg(long)]
        source: String,
        /// Output WAV (file input) or directory (directory input).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use the base model even if adapters exist.
        #[arg(long)]
        no_adapters: bool,
    },
    /// Pairwise Fréchet distances between audio sets.
    EvalFad {
        /// NAME=DIR or DIR; at least two.
        #[arg(long = "set", required = true)]
        sets: Vec<String>,
        #[arg(long)]
        embedding: Option<String>,
    },
    /// Noise-versus-structure sensitivity of each embedding.
    Calibrate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruction error per frequency bin.
    EvalRecon {
        /// Chunk length in milliseconds; repeatable.
        #[arg(long = "chunk-ms")]
        chunk_ms: Vec<f64>,
        /// codec, identity or zero.
        #[arg(long)]
        reconstructor: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Probe classifiers on frozen embeddings.
    EvalProbe {
        /// Label key: rhythm, unit, vowel or detection.
        #[arg(long)]
        task: Option<String>,
        /// Embedding variant; repeatable.
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fleiss's kappa of an items x categories count table.
    Kappa {
        #[arg(long)]
        ratings: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainCodec { .. } => "train-codec",
            Command::TrainMatm { .. } => "train-matm",
            Command::Finetune { phase: Phase::Domain, .. } => "finetune-domain",
            Command::Finetune { phase: Phase::Species, .. } => "finetune-species",
            Command::Translate { .. } => "translate",
            Command::EvalFad { .. } => "eval-fad",
            Command::Calibrate { .. } => "calibrate",
            Command::EvalRecon { .. } => "eval-recon",
            Command::EvalProbe { .. } => "eval-probe",
            Command::Kappa { .. } => "kappa",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out_dir {
        cfg.out_dir = o.clone();
    }
    cfg.merge_presets();
    cfg.derive_seeds();
    if cfg.threads == Some(0) {
        return Err(CliError::config("--threads must be at least 1"));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    commands::dispatch(cfg, &cli.command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
