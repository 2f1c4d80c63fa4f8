use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use medvl_core::dataengine::ChatFormat;

#[derive(Debug, Parser)]
#[command(name = "medvl", version, about = "Build medical vision-language corpora and score model outputs")]
pub struct Cli {
    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize raw datasets into unified JSONL and check split counts.
    Ingest(IngestArgs),
    /// Plan the alignment corpus and optionally run synthesis.
    BuildAlign(BuildAlignArgs),
    /// Build the shuffled instruction-tuning corpus from train splits.
    BuildSft(BuildSftArgs),
    /// Run batch inference against a chat-completions endpoint.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Score(ScoreArgs),
    /// Render metric files as Markdown and CSV tables.
    Report(ReportArgs),
    /// Run ingest, build-sft, render, infer, score and report in sequence.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// A manifest file or a directory of manifests.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// Base URL, or a TOML file with an endpoint table.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model id; required when `--endpoint` is a URL.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildAlignArgs {
    /// JSONL of pool items `{image_ref, caption, dataset_id?, language?}`.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub synthetic_fraction: f64,
    #[arg(long, default_value_t = 2)]
    pub group_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
}

#[derive(Debug, Args)]
pub struct BuildSftArgs {
    /// A manifest file or a directory of manifests.
    #[arg(long, alias = "manifests")]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "messages")]
    pub chat_format: ChatFormat,
    #[arg(long, default_value_t = 10_000)]
    pub shuffle_buffer: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// JSONL of unified samples.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSONL of unified samples the predictions answer.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Directory for metric files.
    #[arg(long)]
    pub out: PathBuf,
    /// Landmark pixel spacing for samples that carry none.
    #[arg(long, default_value_t = medvl_core::metrics::DEFAULT_SPACING_MM_PER_PX)]
    pub spacing: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of metric files.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `manifests`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub chat_format: Option<ChatFormat>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
}
