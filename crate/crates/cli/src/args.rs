use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tokenrank::aggregation::{AssignMode, SeedStrategy};
use tokenrank::engine::Codec;
use tokenrank::pooling::PoolMethod;

#[derive(Debug, Parser)]
#[command(name = "tokenrank", version, about = "Training-free multi-vector image retrieval")]
pub struct Cli {
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "TOKENRANK_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic token store and relevance manifest.
    Synth(SynthArgs),
    /// Compress every token set into K instance tokens.
    Aggregate(AggregateArgs),
    /// Pool every token set into one global descriptor.
    Pool(PoolArgs),
    /// Train a global codebook and VLAD-encode the store.
    Codebook(CodebookArgs),
    /// Build a flat single-vector index over gallery descriptors.
    Index(IndexArgs),
    /// Re-encode gallery multi-vector tokens with a storage codec.
    Quantize(QuantizeArgs),
    /// Run every query for each shortlist size.
    Search(SearchArgs),
    /// Score run files against the manifest.
    Eval(EvalArgs),
    /// Re-run the command recorded in a config.lock.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Aggregate(_) => "aggregate",
            Command::Pool(_) => "pool",
            Command::Codebook(_) => "codebook",
            Command::Index(_) => "index",
            Command::Quantize(_) => "quantize",
            Command::Search(_) => "search",
            Command::Eval(_) => "eval",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub identities: usize,
    #[arg(long, default_value_t = 2)]
    pub gallery_views: usize,
    #[arg(long, default_value_t = 5)]
    pub query_views: usize,
    /// Per-token rotation between views, in degrees.
    #[arg(long, default_value_t = 15.0)]
    pub sigma_deg: f64,
    #[arg(long, default_value_t = 5000)]
    pub distractors: usize,
    #[arg(long, default_value_t = 64)]
    pub n_tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub instance_tokens: usize,
    #[arg(long, default_value_t = 25)]
    pub families: usize,
    #[arg(long, default_value_t = 4)]
    pub background_modes: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0.25)]
    pub occlusion: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMethod {
    /// Seed selection, assignment and the seed-plus-mean combination.
    Instance,
    /// Per-image k-means centroids.
    Kmeans,
    /// The token nearest each per-image k-means centroid.
    Medoid,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AggregateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = AggregateMethod::Instance)]
    pub method: AggregateMethod,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value = "fps")]
    pub seeds: SeedStrategy,
    #[arg(long, default_value = "hard_top1")]
    pub assign: AssignMode,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f32,
    /// Lloyd iterations for the k-means and medoid methods.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GemModeArg {
    Clamp,
    Signed,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PoolArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "mean")]
    pub pool: PoolMethod,
    #[arg(long, default_value_t = 3.0)]
    pub gem_p: f32,
    #[arg(long, value_enum, default_value_t = GemModeArg::Clamp)]
    pub gem_mode: GemModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncodeArg {
    /// One PCA-whitened vector per image.
    Sv,
    /// The residual blocks as a multi-vector set.
    Mv,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CodebookArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Codebook and PCA are trained on gallery images only.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = EncodeArg::Mv)]
    pub encode: EncodeArg,
    /// Soft assignment sharpness; hard assignment when omitted.
    #[arg(long)]
    pub soft_alpha: Option<f32>,
    #[arg(long, default_value_t = 500_000)]
    pub sample_budget: usize,
    #[arg(long, default_value_t = 25)]
    pub iters: usize,
    #[arg(long, default_value_t = 384)]
    pub pca_dim: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IndexArgs {
    /// Descriptor store (one vector per record).
    #[arg(long)]
    pub descriptors: PathBuf,
    /// Keep only gallery images when given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct QuantizeArgs {
    /// Multi-vector store (instance tokens or raw tokens).
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "int8")]
    pub codec: Codec,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SearchArgs {
    /// Single-vector descriptors for Stage 1 (queries and gallery).
    #[arg(long)]
    pub descriptors: PathBuf,
    /// Multi-vector tokens for reranking (queries and gallery).
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,500")]
    pub shortlist: Vec<usize>,
    /// Emit the Stage-1 shortlists without reranking.
    #[arg(long)]
    pub stage1_only: bool,
    /// Also score every query against the whole gallery.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value = "f32")]
    pub codec: Codec,
    /// Prebuilt flat index; built from the descriptors when omitted.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Prebuilt multi-vector store; built from the tokens when omitted.
    #[arg(long)]
    pub mvstore: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub recall_at: Vec<usize>,
    /// Shortlist size for R@S; inferred from uniform run lengths when omitted.
    #[arg(long)]
    pub shortlist: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub lock: PathBuf,
}
