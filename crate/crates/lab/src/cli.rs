use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "intactkv", version, about = "Desk-scale lab for lossless KV prefixes under weight quantization")]
pub struct Cli {
    /// RNG seed; each subcommand documents its default.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output file. Companion CSVs are written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Recipe {
    /// Default 4-layer model.
    Canonical,
    /// Default model with the [BOS] sink injected.
    Sink,
    /// One layer, one head, width 4.
    Micro,
}

#[derive(Debug, Clone, Args)]
pub struct WeightQuant {
    /// Weight bits (2..=8). Omit for full precision.
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long)]
    pub symmetric: bool,
}

#[derive(Debug, Clone, Args)]
pub struct KvQuantArgs {
    /// KV-cache bits, per head and position, computed on the fly.
    #[arg(long)]
    pub kv_bits: Option<u32>,
    /// Leading positions kept in full precision. Defaults to the IntactKV
    /// length (0 without one).
    #[arg(long)]
    pub keep_prefix_fp: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded model file (default seed 42).
    InitModel {
        #[arg(long, value_enum, default_value_t = Recipe::Sink)]
        recipe: Recipe,
    },
    /// Sample a token corpus from a model behind a shared prompt (default seed 0).
    MakeCorpus {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 128)]
        sequences: usize,
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[arg(long, default_value_t = 8)]
        prompt_len: usize,
    },
    /// Per-token activation and attention statistics with pivot flags.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus line (0-based) to run.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Layer for the pivot table; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = intactkv_core::pivot::DEFAULT_ACT_RATIO)]
        act_ratio: f64,
        #[arg(long, default_value_t = intactkv_core::pivot::DEFAULT_MASS_RATIO)]
        mass_ratio: f64,
    },
    /// Round-to-nearest group-wise weight quantization.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        quant: WeightQuant,
    },
    /// Generate a lossless prefix cache with the full-precision model.
    GenerateKv {
        #[arg(long)]
        model: PathBuf,
        /// Prefix token ids, comma or space separated.
        #[arg(long, conflicts_with_all = ["corpus", "prefix_len"])]
        prefix: Option<String>,
        /// Take the prefix from the first corpus line instead.
        #[arg(long, requires = "prefix_len")]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        prefix_len: Option<usize>,
    },
    /// Train the prefix cache against the full-precision layer outputs (default seed 0).
    Calibrate {
        /// Full-precision model; the quantized copy is built from the flags.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        quant: WeightQuant,
        #[arg(long)]
        corpus: PathBuf,
        /// Prefix length taken from the first corpus line.
        #[arg(long, default_value_t = 1)]
        prefix_len: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        grad_accum: usize,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        /// Finite-difference check on this many coordinates before training.
        #[arg(long, default_value_t = 0)]
        grad_check_coords: usize,
    },
    /// Continuation MSE as a function of the lossless prefix length.
    SweepKvSize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        quant: WeightQuant,
        #[command(flatten)]
        kv: KvQuantArgs,
        #[arg(long, default_value_t = 8)]
        m_max: usize,
        /// Use the first N corpus lines (default: all).
        #[arg(long)]
        n_sequences: Option<usize>,
    },
    /// Perplexity under full precision, quantized weights, or quantized weights with a lossless prefix.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        quant: WeightQuant,
        #[command(flatten)]
        kv: KvQuantArgs,
        /// Generate a lossless prefix from the first M tokens of each sequence.
        #[arg(long, conflicts_with = "kv_file")]
        intactkv_len: Option<usize>,
        /// Load a prefix cache file; every sequence must start with its tokens.
        #[arg(long = "kv")]
        kv_file: Option<PathBuf>,
        /// Token forced at position 0. Defaults to 0 when a prefix is used.
        #[arg(long)]
        bos: Option<u32>,
        /// First position whose next-token prediction is scored.
        #[arg(long, default_value_t = 1)]
        score_from: usize,
        /// Dataset label for the report (default: corpus file stem).
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Monte-Carlo check of the attention error bound; exits 1 on any violation.
    VerifyBound {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 10000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        pivot_count: usize,
    },
}
