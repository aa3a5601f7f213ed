//! Command-line front end: chunking, training, encoding, search, evaluation,
//! fusion and gradient verification.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, Settings};
use error::{CliError, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "revela", version, about = "Self-supervised dense retriever training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// JSON file of flat dotted keys, e.g. {"train.tau": 0.05}.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model and objective overrides.
#[derive(Debug, Clone, Args, Default)]
pub struct ModelFlags {
    /// Similarity temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// V-normalization stabilizer.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Disable V-normalization of cross-document attention.
    #[arg(long)]
    pub no_vnorm: bool,
    /// Embed the first half of each chunk on the query side.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub half_chunk: Option<bool>,
    /// Total optimizer steps (default: one pass over the batch file).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a corpus into a batch file.
    Chunk {
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_words: Option<usize>,
        /// Shuffle chunks globally before grouping (locality ablation).
        #[arg(long)]
        random: bool,
        /// Batch files to merge with the corpus batches.
        #[arg(long, value_name = "PATH", num_args = 1..)]
        merge: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train retriever and language model jointly.
    Train {
        #[arg(long, value_name = "PATH")]
        batches: PathBuf,
        /// Checkpoint to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Per-step metrics log (JSONL).
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Train the retriever against a frozen language model (distillation baseline).
    TrainReplug {
        #[arg(long, value_name = "PATH")]
        batches: PathBuf,
        /// Checkpoint holding the frozen language model.
        #[arg(long, value_name = "PATH")]
        lm: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Embed every record of a corpus or query file.
    Encode {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// `query` or `passage`.
        #[arg(long, default_value = "passage")]
        role: String,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rank a corpus for each query and write a TREC run.
    Search {
        #[arg(long, value_name = "PATH", required_unless_present = "bm25", conflicts_with = "bm25")]
        checkpoint: Option<PathBuf>,
        /// Lexical search instead of a dense checkpoint.
        #[arg(long)]
        bm25: bool,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long, value_name = "PATH")]
        queries: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Run tag (last column).
        #[arg(long)]
        tag: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a run against relevance judgments.
    Eval {
        #[arg(long, value_name = "PATH")]
        run: PathBuf,
        #[arg(long, value_name = "PATH")]
        qrels: PathBuf,
        /// Comma-separated, e.g. ndcg@10,recall@100.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Write the report as JSON here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reciprocal rank fusion of two runs.
    Fuse {
        #[arg(value_name = "RUN1")]
        run1: PathBuf,
        #[arg(value_name = "RUN2")]
        run2: PathBuf,
        /// Fused run file; printed to stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = revela_core::evalretrieval::RRF_K)]
        rrf_k: usize,
        #[arg(long, default_value_t = revela_core::evalretrieval::RRF_DEPTH)]
        depth: usize,
        #[arg(long, default_value = "rrf")]
        tag: String,
    },
    /// Finite-difference check of the training gradients on a tiny model.
    Gradcheck {
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

/// Loads the config file and applies the shared flags.
pub fn settings(common: &Common) -> Result<Settings, CliError> {
    let mut s = Settings::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        s.set("seed", seed);
    }
    Ok(s)
}

pub fn apply_model_flags(s: &mut Settings, f: &ModelFlags) {
    if let Some(t) = f.tau {
        s.set("train.tau", t);
    }
    if let Some(e) = f.epsilon {
        s.set("model.epsilon", e);
    }
    if f.no_vnorm {
        s.set("model.v_normalization_enabled", false);
    }
    if let Some(h) = f.half_chunk {
        s.set("train.half_chunk_mode", h);
    }
    if let Some(n) = f.steps {
        s.set("train.total_steps", n);
    }
}

pub fn resolve(s: &Settings) -> Result<RunConfig, CliError> {
    let cfg = s.resolve()?;
    cfg.log_resolved();
    Ok(cfg)
}

fn init_logging() {
    let level = std::env::var("REVELA_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parses `args` and runs the subcommand; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    init_logging();
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
