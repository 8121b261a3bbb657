use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "topicattn", version, about = "One-layer transformer on topic-model data", args_override_self = true)]
pub struct Cli {
    /// Worker threads for document-parallel work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Sample a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model with masked-token prediction.
    Train(TrainArgs),
    /// Check closed-form optima against oracles and sweeps.
    Verify(VerifyArgs),
    /// Sweep the attention-level loss landscape.
    Landscape(LandscapeArgs),
    /// Structure reports for a checkpoint.
    Analyze(AnalyzeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Verify(_) => "verify",
            Command::Landscape(_) => "landscape",
            Command::Analyze(_) => "analyze",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::GenData(a) => a.seed,
            Command::Train(a) => a.seed,
            Command::Verify(_) => None,
            Command::Landscape(a) => a.seed,
            Command::Analyze(a) => a.seed,
        }
    }

    /// Whether the command draws random numbers and so needs a seed.
    pub fn is_randomized(&self) -> bool {
        match self {
            Command::Verify(_) => false,
            Command::Landscape(a) => !a.mc_cells.is_empty() || a.mc_argmin,
            _ => true,
        }
    }

    pub fn out_dir(&self) -> &PathBuf {
        match self {
            Command::GenData(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Verify(a) => &a.out,
            Command::Landscape(a) => &a.out,
            Command::Analyze(a) => &a.out,
        }
    }
}

/// Topic-model flags.
#[derive(Debug, Clone, Args, Serialize)]
pub struct CorpusArgs {
    /// Number of topics.
    #[arg(long = "T")]
    pub num_topics: Option<usize>,
    /// Words per topic.
    #[arg(long = "v")]
    pub words_per_topic: Option<usize>,
    /// Exactly this many topics per document, uniformly weighted.
    #[arg(long, conflicts_with = "dirichlet")]
    pub fixed_tau: Option<usize>,
    /// Dirichlet concentration of the topic weights (default 0.1).
    #[arg(long)]
    pub dirichlet: Option<f64>,
    /// Fixed document length.
    #[arg(long, conflicts_with_all = ["n_min", "n_max"])]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub n_min: usize,
    #[arg(long, default_value_t = 150)]
    pub n_max: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MaskArgs {
    #[arg(long, default_value_t = 0.15)]
    pub p_mask: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p_keep: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p_random: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Also write masked copies of the documents.
    #[arg(long)]
    pub masked: bool,
    #[command(flatten)]
    pub masking: MaskArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Squared,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Joint,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingArg {
    Onehot,
    Trained,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub masking: MaskArgs,
    /// Train on a fixed corpus file instead of fresh samples.
    #[arg(long)]
    pub docs: Option<PathBuf>,
    /// Count-level documents of this length (uniform attention only).
    #[arg(long, conflicts_with = "docs")]
    pub long_docs: Option<u64>,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Onehot)]
    pub embedding: EmbeddingArg,
    /// Embedding width for trained embeddings.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_attn: Option<usize>,
    /// Drop the key, query and value biases.
    #[arg(long)]
    pub no_biases: bool,
    #[arg(long, default_value_t = 0.1)]
    pub sigma0: f64,
    /// Comma-separated freeze items: emb=onehot, attn=uniform,
    /// wv[=init|identity|block|diagonal], bv, bpred[=init|zero|theorem], wk, wq.
    #[arg(long, value_delimiter = ',')]
    pub freeze: Vec<String>,
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = OptArg::Adam)]
    pub opt: OptArg,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// L2 coefficient on `W_V`.
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Joint)]
    pub schedule: ScheduleArg,
    /// Stage-1 length for the two-stage schedule.
    #[arg(long, default_value_t = 400)]
    pub stage1: usize,
    /// Enter stage 2 with the closed-form value matrix.
    #[arg(long)]
    pub analytic_wv: bool,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// Keep one mask per corpus document instead of redrawing every step.
    #[arg(long)]
    pub fixed_masks: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoremArg {
    WvL2,
    Embedding,
    AttentionBlock,
    AttentionDiagonal,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = TheoremArg::All)]
    pub theorem: TheoremArg,
    /// Defaults to 10 for the value and embedding checks, 100 for attention.
    #[arg(long = "T")]
    pub num_topics: Option<usize>,
    /// Defaults to 10 for the value and embedding checks, 300 for attention.
    #[arg(long = "v")]
    pub words_per_topic: Option<usize>,
    /// Defaults to 2 for the value and embedding checks, 20 for attention.
    #[arg(long)]
    pub tau: Option<usize>,
    #[command(flatten)]
    pub masking: MaskArgs,
    /// Grid points per axis for the attention sweeps.
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseArg {
    Block,
    Diagonal,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LandscapeArgs {
    #[arg(long, value_enum, default_value_t = CaseArg::Block)]
    pub case: CaseArg,
    #[arg(long = "T", default_value_t = 100)]
    pub num_topics: usize,
    #[arg(long = "v", default_value_t = 300)]
    pub words_per_topic: usize,
    #[arg(long, default_value_t = 20)]
    pub tau: usize,
    #[command(flatten)]
    pub masking: MaskArgs,
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub min: f64,
    #[arg(long, default_value_t = 1e7)]
    pub max: f64,
    /// Grid cells (`alpha_index:beta_index`) to cross-check by Monte Carlo.
    #[arg(long, value_delimiter = ',')]
    pub mc_cells: Vec<String>,
    /// Also cross-check the argmin cell.
    #[arg(long)]
    pub mc_argmin: bool,
    #[arg(long, default_value_t = 2000)]
    pub mc_doc_len: usize,
    #[arg(long, default_value_t = 10000)]
    pub mc_positions: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus whose masked documents feed the attention report.
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub attention_classes: bool,
    /// Block reports for `W_V` and `W_E^T W_E`.
    #[arg(long)]
    pub blocks: bool,
    /// Report raw attention weights instead of length-normalized ones.
    #[arg(long)]
    pub no_debias: bool,
    #[command(flatten)]
    pub masking: MaskArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}
