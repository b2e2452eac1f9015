mod commands;
mod ini;
mod output;
mod plan;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Adaptive per-head KV-cache compression: profile attention heads, generate
/// with compressed caches, and report memory and recovery tradeoffs.
///
/// Report schemas (CSV header rows; JSON output is an array of objects with
/// the same keys):
///   profile.csv      layer,head,policy,recovery,cost_tokens
///   layers.csv       layer,policy,fraction
///   summary.csv      steps,pruned_ratio,mean_recovery,mean_cache_tokens,mean_full_tokens
///   tradeoff.csv     threshold,pruned_ratio,mean_recovery
///   consistency.csv  layer,head,step,policy,matches_first
///   comparison.csv   method,pruned_ratio,mean_recovery
///   memory.csv       num_layers,num_heads,head_dim,batch_size,seq_len,bytes_per_scalar,
///                    full_cache_bytes,sidecar_overhead_fraction
///   diagnostics.ndjson  one object per step: step,context_len,retained,total_tokens,token[,recovery]
#[derive(Debug, Parser)]
#[command(name = "akv", version, verbatim_doc_comment)]
pub struct Cli {
    /// key=value config file; command-line flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the synthetic model and nucleus sampling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-head work (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default: a fresh runs/<command>-NNNN)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SourceArgs {
    /// Synthetic model plan file
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Recorded attention trace (binary or NDJSON)
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Prompt length for synthetic models
    #[arg(long)]
    pub prompt_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProfilerArgs {
    /// Recovery threshold T in [0, 1]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// recovery | cosine
    #[arg(long)]
    pub criterion: Option<String>,
    /// default | drop:<atom> | order:<atom>,<atom>,...
    #[arg(long)]
    pub feasible: Option<String>,
    /// Query rows profiled: causal | fixed | last
    #[arg(long)]
    pub scope: Option<String>,
    /// Local window as a fraction of the prompt length
    #[arg(long)]
    pub r_l: Option<f64>,
    /// Frequent budget as a fraction of the context length
    #[arg(long)]
    pub r_f: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// greedy | nucleus
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record a trace from a synthetic model plan
    Synth {
        #[command(flatten)]
        source: SourceArgs,
        /// Greedy decoding steps recorded after the prompt
        #[arg(long)]
        decode_steps: Option<usize>,
        /// Trace path (default: trace.akvt in the run directory)
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Write the NDJSON encoding instead of binary
        #[arg(long)]
        ndjson: bool,
    },
    /// Profile every head on the prompt
    Profile {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        profiler: ProfilerArgs,
    },
    /// Generate with adaptive (or fixed) compressed caches
    Generate {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        profiler: ProfilerArgs,
        #[command(flatten)]
        gen: GenArgs,
        /// Impose one policy on every head instead of profiling
        #[arg(long, conflicts_with = "baseline")]
        policy: Option<String>,
        /// Same as --policy; names a fixed baseline such as local+frequent
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Tradeoff, consistency, comparison, memory and diagnostics reports
    Report {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        profiler: ProfilerArgs,
        #[command(flatten)]
        gen: GenArgs,
        /// Comma-separated thresholds, e.g. 0.91,0.95,0.98
        #[arg(long)]
        tradeoff: Option<String>,
        /// Comma-separated decoding steps starting at 1, e.g. 1,10,20,30
        #[arg(long)]
        consistency: Option<String>,
        /// Comma-separated fixed policies compared against adaptive
        #[arg(long)]
        compare: Option<String>,
        /// Feasible-family variant compared at the same threshold (repeatable)
        #[arg(long)]
        variant: Vec<String>,
        /// Model shape for the memory table: 7b, 13b, 30b or 65b
        #[arg(long)]
        memory: Option<String>,
        /// Diagnostics NDJSON to recount into a summary
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// Profile CSV to summarize per layer
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Full-cache bytes and sidecar overhead for a model shape
    Memory {
        /// 7b, 13b, 30b or 65b (batch 16, sequence 512, fp16)
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        layers: Option<u64>,
        #[arg(long)]
        heads: Option<u64>,
        #[arg(long)]
        head_dim: Option<u64>,
        #[arg(long)]
        batch: Option<u64>,
        #[arg(long)]
        seq_len: Option<u64>,
        #[arg(long)]
        bytes: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AKV_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {message}", error_code(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<akv_core::Error>() {
            return core.code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid_input"
}
