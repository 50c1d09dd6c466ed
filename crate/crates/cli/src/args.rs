use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "lazyprune", version, about = "CPU transformer inference with progressive token pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random model in LZWT format.
    GenModel(GenModelArgs),
    /// Generate from one prompt (or every corpus file) and write the report.
    Run(RunArgs),
    /// Compare policies against the baseline over a corpus.
    Bench(BenchArgs),
    /// Single-boundary grid of (layer, fraction) cells over a corpus.
    Sweep(SweepArgs),
    /// Per-layer histogram of next-token attention over prompt tokens.
    Profile(ProfileArgs),
    /// Generate while checking cache and ledger invariants after every step.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 688)]
    pub ff: usize,
    #[arg(long, default_value_t = 258)]
    pub vocab: usize,
    #[arg(long, default_value_t = 8192)]
    pub max_position: usize,
    /// Store a separate unembedding matrix instead of reusing the embedding.
    #[arg(long)]
    pub untied: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct PromptSource {
    /// Inline prompt text.
    #[arg(long)]
    pub prompt: Option<String>,
    /// File whose bytes are the prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Directory of prompt files, used in file-name order.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Baseline,
    Lazy,
    Random,
    Static,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, value_enum, default_value_t = PolicyKind::Baseline)]
    pub policy: PolicyKind,
    /// Lazy schedule `layer:fraction[,layer:fraction]*`; empty means no pruning.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Random policy: fraction of unprotected prompt tokens dropped.
    #[arg(long)]
    pub drop_ratio: Option<f64>,
    /// Static policy: layers computed before the one-time selection.
    #[arg(long)]
    pub static_layer: Option<usize>,
    /// Static policy: fraction of prompt tokens kept.
    #[arg(long)]
    pub static_fraction: Option<f64>,
    /// Random policy seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerationArgs {
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// Token id that ends generation early; repeatable.
    #[arg(long = "stop-id")]
    pub stop_ids: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: PromptSource,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub generation: GenerationArgs,
    /// Report JSON (an array when reading a corpus).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Policy specs: `baseline`, `lazy:<schedule>`, `random:<drop>[:<seed>]`,
    /// `static:<layer>:<fraction>`. Repeatable.
    #[arg(long = "policy", required = true)]
    pub policies: Vec<String>,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = lazyprune::bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: PromptSource,
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.7,0.4,0.1")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub max_new: usize,
    /// Timed prefills per cell; 1 with no warmup reuses the fidelity run.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: PromptSource,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1")]
    pub thresholds: Vec<f64>,
    /// Histogram CSV; with a corpus, rows of every prompt are concatenated.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: PromptSource,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub generation: GenerationArgs,
    /// Override a selection: `step@layer=tok,tok,...`; repeatable. The keep
    /// set at that boundary becomes the listed tokens plus protected ones.
    #[arg(long = "force-keep")]
    pub force_keep: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
