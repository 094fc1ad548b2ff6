use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "anticipate",
    version,
    about = "Long-term action anticipation from clip features and object prompts",
    after_help = "ANTICIPATE_THREADS caps the worker threads used for data preparation, training and evaluation."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Object-prompt vocabularies.
    Prompts {
        #[command(subcommand)]
        action: PromptsCommand,
    },
    /// Synthetic benchmark datasets.
    Synth {
        #[command(subcommand)]
        action: SynthCommand,
    },
    /// Train an encoder and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file against ground truth.
    Eval(EvalArgs),
    /// Attention rollout from prediction tokens to observed objects.
    Rollout(RolloutArgs),
    /// Check a dataset directory (and optionally predictions) for format errors.
    Validate(ValidateArgs),
}

#[derive(Debug, Subcommand)]
pub enum PromptsCommand {
    Build(PromptsBuildArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    Gen(SynthGenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    MostCommon,
    Kmeans,
    Fixed,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct PromptsBuildArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Dataset directory whose training-split nouns are counted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Vocabulary size.
    #[arg(long, default_value_t = anticipate::prompts::DEFAULT_PROMPT_CAP)]
    pub n: usize,
    /// Clusters for `kmeans`; defaults to `n`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Noun embedding pack for `kmeans`; defaults to `<data>/noun_embeddings.fpk`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Category file for `fixed`; the COCO list when omitted.
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file: JSON with provenance if it ends in `.json`, one name per line otherwise.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Run config whose `synth` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_videos: Option<usize>,
    #[arg(long)]
    pub noun_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to run; writes `predictions.jsonl` next to the report.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Existing predictions to score instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Example to analyse; the first validation example when omitted.
    #[arg(long)]
    pub example: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Also write a grayscale PGM of the heatmap.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}
