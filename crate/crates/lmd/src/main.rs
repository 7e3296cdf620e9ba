//! Command-line experiment runner: each subcommand executes one pipeline
//! stage over a TOML config, with overridable output directory, seed, and
//! thread count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lmd::config::ExperimentConfig;
use lmd::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "lmd", version, about = "Attack–defend–detect pipeline for speaker verification")]
struct Cli {
    /// Experiment config; the desk-scale preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Drop adversarial examples that failed to cross the threshold (and
    /// their matched genuine counterparts) from the evaluation sets.
    #[arg(long, global = true)]
    exclude_failed_adv: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus and trial lists.
    Synth,
    /// Train the victim and substitute ASV models and calibrate η.
    TrainAsv,
    /// Build the adversarial and matched-genuine sets over the attack grids.
    Attack,
    /// Search the MCS-H/MCS-D hyperparameters (mean ± std over seeded runs).
    SearchMcs,
    /// Train the learnable mask detector.
    TrainLmd,
    /// Compute detection/purification tables and plot data.
    Evaluate,
    /// Emit the consolidated text report.
    Report,
    /// Print the effective config (preset plus overrides) as TOML.
    PrintConfig,
}

fn error_category(e: &PipelineError) -> &'static str {
    match e {
        PipelineError::Config(_) => "config",
        PipelineError::MissingArtifact { .. } => "missing-artifact",
        PipelineError::Io { .. } => "io",
        PipelineError::Corpus(_) => "corpus",
        PipelineError::Asv(_) => "asv",
        PipelineError::Attack(_) => "attack",
        PipelineError::Detect(_) => "detect",
        PipelineError::Metrics(_) => "metrics",
        PipelineError::Dsp(_) => "dsp",
        PipelineError::Ckpt(_) => "checkpoint",
        PipelineError::Manifest(_) | PipelineError::BadArtifact { .. } => "artifact",
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::desk_preset(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        // Best effort: a pre-existing global pool keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Synth => pipeline::cmd_synth(&cfg),
        Command::TrainAsv => pipeline::cmd_train_asv(&cfg),
        Command::Attack => pipeline::cmd_attack(&cfg),
        Command::SearchMcs => pipeline::cmd_search_mcs(&cfg),
        Command::TrainLmd => pipeline::cmd_train_lmd(&cfg),
        Command::Evaluate => pipeline::cmd_evaluate(&cfg, cli.exclude_failed_adv),
        Command::Report => pipeline::cmd_report(&cfg),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_category(&e));
            ExitCode::FAILURE
        }
    }
}
