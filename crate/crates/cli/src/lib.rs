//! Command-line experiments over the rock-core pipeline: generate a
//! synthetic bundle, train the knowledge scorer, train the reasoner,
//! evaluate it with and without knowledge, and query retrieval ad hoc.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const SUBCOMMANDS: [&str; 5] = ["generate", "train-scorer", "train-reasoner", "evaluate", "retrieve"];

#[derive(Debug, Parser)]
#[command(name = "rock", version, about = "Knowledge-based video question answering experiments")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat key=value file (or a previous run manifest) supplying flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset bundle and its ground-truth ledger.
    Generate(GenerateArgs),
    /// Build the knowledge base from the training split and train the scorer.
    TrainScorer(TrainScorerArgs),
    /// Train the answer reasoner on retrieved (or gold) knowledge.
    TrainReasoner(TrainReasonerArgs),
    /// Score a split with and without knowledge and print the results table.
    Evaluate(EvaluateArgs),
    /// Print the top-k knowledge entries for one question.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub n_episodes: usize,
    #[arg(long, default_value_t = 5)]
    pub clips_per_episode: usize,
    #[arg(long, default_value_t = 4)]
    pub questions_per_clip: usize,
    #[arg(long, default_value_t = 40)]
    pub n_knowledge: usize,
    /// Probability that an instance is decidable from its knowledge.
    #[arg(long, default_value_t = 1.0)]
    pub determinism: f64,
    #[arg(long, default_value_t = 4)]
    pub filler_vocab: usize,
    #[arg(long, default_value_t = 30)]
    pub concept_vocab: usize,
    #[arg(long, default_value_t = 8)]
    pub character_vocab: usize,
    #[arg(long, default_value_t = 6)]
    pub frames_per_clip: usize,
    #[arg(long, default_value_t = 8)]
    pub d_img: usize,
}

/// Dataset location and the episode split shared by the training commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Train/val/test episode fractions, e.g. `0.6,0.2,0.2`.
    #[arg(long)]
    pub ratios: String,
    /// Seed of the episode shuffle; defaults to `--seed`.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainScorerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// k for the held-out recall metric.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 4)]
    pub negatives_per_positive: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainReasonerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Trained scorer checkpoint; required unless `--gold-knowledge`.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Knowledge base file; defaults to `kb.jsonl` next to the scorer.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Use each instance's annotated knowledge instead of retrieval.
    #[arg(long)]
    pub gold_knowledge: bool,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// image, concepts, facial, caption or none.
    #[arg(long, default_value = "image")]
    pub variant: String,
    #[arg(long, default_value_t = 4)]
    pub n_frames: usize,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub d_lang: usize,
    #[arg(long, default_value_t = 512)]
    pub l_max: usize,
    #[arg(long, default_value_t = 5)]
    pub knowledge_slots: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.01)]
    pub head_init_std: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained reasoner checkpoint.
    #[arg(long)]
    pub reasoner: PathBuf,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub gold_knowledge: bool,
    /// Defaults to the k the reasoner was trained with.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scorer: PathBuf,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Question instance id.
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

/// Parses `args` (with `--config` expansion) and runs the command.
pub fn run(args: Vec<String>) -> anyhow::Result<()> {
    let args = config::expand_args(args, &SUBCOMMANDS)?;
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::TrainScorer(a) => commands::train_scorer(&a),
        Command::TrainReasoner(a) => commands::train_reasoner(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Retrieve(a) => commands::retrieve(&a),
    }
}
