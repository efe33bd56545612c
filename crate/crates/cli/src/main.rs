//! `vqlogits`: train, evaluate, quantize, benchmark and inspect models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vqlogits::data::Split;
use vqlogits::model::TieMode;
use vqlogits::quantize::MappingStrategy;
use vqlogits::train::FinetuneScope;

use config::{HeadChoice, InitChoice};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(vqlogits::Error),
}

impl From<vqlogits::Error> for CliError {
    fn from(e: vqlogits::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(vqlogits::Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "vqlogits", version, about = "Vector-quantized output layers for small language models")]
struct Cli {
    /// Seed for initialization, batching, dropout and clustering.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Computation is single-threaded; the value is recorded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config file with `key = value` sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train or fine-tune a model and write its run directory.
    Train(TrainArgs),
    /// Print the perplexity of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Turn a full-head checkpoint into a quantized one without training.
    Quantize(QuantizeArgs),
    /// Write the cost and latency report for a grid of heads.
    Bench(BenchArgs),
    /// Show which tokens share a code.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Training corpus; defaults to $VQLOGITS_DATA_DIR/moby_dick.txt.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Output head.
    #[arg(long, value_enum)]
    pub head: Option<HeadChoice>,
    /// Codebook size.
    #[arg(long = "K", alias = "k")]
    pub k: Option<usize>,
    /// Inner dimension of the low-rank head.
    #[arg(long)]
    pub d_rank: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitChoice>,
    /// kmeans_output, kmeans_input, freq_binning, contiguous_blocks or random.
    #[arg(long)]
    pub mapping: Option<MappingStrategy>,
    /// full_model, head_and_final_norm, codebook_only or none.
    #[arg(long)]
    pub scope: Option<FinetuneScope>,
    /// Checkpoint to start from; a full-head checkpoint for --init option_a.
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
    /// Whether the codebook is updated during training.
    #[arg(long)]
    pub codebook_trainable: Option<bool>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Linear warmup steps; capped at --steps.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate at the end of the cosine decay.
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Tokens per sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Steps between validation runs and checkpoints; 0 disables them.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Validation batches per evaluation; 0 means the whole split.
    #[arg(long)]
    pub eval_batches: Option<usize>,
    /// Transformer blocks.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Feed-forward width.
    #[arg(long)]
    pub d_ffn: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Longest sequence the position table covers.
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Dropout probability during training.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// untied, tie_full or tie_codebook.
    #[arg(long)]
    pub tie_mode: Option<TieMode>,
    /// Vocabulary size cap, special tokens included.
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Minimum training-split count for a word to get its own id.
    #[arg(long)]
    pub min_freq: Option<u64>,
    /// Lloyd iterations for k-means mappings.
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    /// k-means restarts; the lowest-distortion run is kept.
    #[arg(long)]
    pub kmeans_restarts: Option<usize>,
    /// Leave the tokens_per_sec column empty so metrics are reproducible.
    #[arg(long)]
    pub no_throughput: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    pub split: Split,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defaults to the model's maximum sequence length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Batches to evaluate; 0 means the whole split.
    #[arg(long, default_value_t = 0)]
    pub max_batches: usize,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "K", alias = "k")]
    pub k: usize,
    /// Quantized checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mapping_out: Option<PathBuf>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub codebook_trainable: bool,
    #[arg(long, default_value = "kmeans_output")]
    pub mapping: MappingStrategy,
    #[arg(long, default_value_t = vqlogits::quantize::DEFAULT_KMEANS_ITERS)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 1)]
    pub kmeans_restarts: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `heads=full,vq;K=256,1024;V=32768;d=256;B=16;S=1024;reps=5`.
    #[arg(long, default_value = "")]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained checkpoint whose perplexity fills the matching row.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    pub split: Split,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Quantized checkpoint; supplies both mapping and vocabulary.
    #[arg(long, conflicts_with_all = ["mapping", "vocab"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub mapping: Option<PathBuf>,
    #[arg(long, requires = "mapping")]
    pub vocab: Option<PathBuf>,
    /// Codes to list; all codes when neither this nor --stats is given.
    #[arg(long)]
    pub code: Vec<usize>,
    #[arg(long)]
    pub stats: bool,
    #[arg(long)]
    pub csv: bool,
    /// Members shown per code; 0 shows all.
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    /// Largest clusters listed by --stats.
    #[arg(long, default_value_t = 10)]
    pub largest: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => config::RunConfig::load(path)?,
        None => config::RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        cfg.threads = threads;
    }
    if cfg.threads == 0 {
        cfg.threads = 1;
    }
    if cfg.threads > 1 {
        log::warn!("computation is single-threaded; --threads {} is recorded only", cfg.threads);
    }
    match cli.command {
        Command::Train(a) => commands::train(cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Quantize(a) => commands::quantize(&cfg, &a),
        Command::Bench(a) => commands::bench(&cfg, &a),
        Command::Inspect(a) => commands::inspect(&a),
    }
}
