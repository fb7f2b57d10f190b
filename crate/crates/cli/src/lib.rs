//! Command-line harness: split preparation, training, evaluation, ablations,
//! gradient checks and attention/match reports.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "smanet", version, about = "Few-shot intent detection with semantic matching and aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    out: Option<String>,
    /// Labeled corpus (`data.path`).
    #[arg(long, global = true)]
    data: Option<String>,
    /// Word vectors file or `synthetic:<d_w>` (`embeddings`).
    #[arg(long, global = true)]
    embeddings: Option<String>,
    /// Parameter file to evaluate or report on (`model.checkpoint`).
    #[arg(long, global = true)]
    checkpoint: Option<String>,
    /// Number of training episodes (`episode.count`).
    #[arg(long, global = true)]
    episodes: Option<String>,
    /// Evaluation label space: novel, joint or both (`eval.space`).
    #[arg(long, global = true)]
    space: Option<String>,
    /// Worker threads for evaluation and ablation (`threads`).
    #[arg(long, global = true)]
    threads: Option<String>,
    /// Training seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the seen/novel/joint split and write its manifest.
    PrepareSplits,
    /// Episodic meta-training; writes checkpoints and a per-episode log.
    Train,
    /// Accuracy averaged over sampled episodes.
    EvalEpisodic,
    /// Accuracy over the full novel and joint label spaces.
    EvalNonepisodic,
    /// Matcher and regularizer ablation grids.
    Ablate,
    /// Finite-difference gradient check of the full loss on a tiny model.
    GradCheck,
    /// Attention matrices and pairwise match scores as CSV.
    Report,
}

impl CommonArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("output.dir", self.out),
            ("data.path", self.data),
            ("embeddings", self.embeddings),
            ("model.checkpoint", self.checkpoint),
            ("episode.count", self.episodes),
            ("eval.space", self.space),
            ("threads", self.threads),
            ("train.seed", self.seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for o in &self.overrides {
            cfg.apply(o)?;
        }
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let cfg = cli.common.into_config()?;
    match cli.command {
        Command::PrepareSplits => commands::prepare_splits(&cfg),
        Command::Train => commands::train(&cfg),
        Command::EvalEpisodic => commands::eval_episodic(&cfg),
        Command::EvalNonepisodic => commands::eval_nonepisodic(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::GradCheck => commands::grad_check(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

/// Process entry point: one-line diagnostic and a nonzero status on failure.
pub fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return if clap_err.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
            }
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
