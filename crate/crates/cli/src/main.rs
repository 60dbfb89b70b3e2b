//! `selfret`: build, query, evaluate and serve a generative retrieval index.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data or files,
//! 3 runtime failure (model backend, service).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "selfret", version, about = "Generative retrieval over a token trie")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "SELFRET_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (overrides mixture.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSONL corpus into a store file.
    Ingest(IngestArgs),
    /// Build the trie index (and vocabulary) from a store file.
    BuildIndex(BuildIndexArgs),
    /// Train the n-gram reference model.
    TrainLm(TrainLmArgs),
    /// Retrieve and rerank for one query or a query file; writes a run file.
    Retrieve(RetrieveArgs),
    /// Write fine-tuning examples as JSONL.
    GenTrainData(GenTrainDataArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
    /// Measure retrieval latency per beam size.
    Bench(BenchArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus JSONL with doc_id, title and text per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Passage word budget (overrides corpus.max_words).
    #[arg(long)]
    pub max_words: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the vocabulary, one token per line.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    /// Text files whose words join the vocabulary (queries, answers).
    #[arg(long = "extra-text")]
    pub extra_text: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Index whose vocabulary the model uses.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub order: Option<usize>,
    /// Add-k smoothing constant.
    #[arg(long)]
    pub k: Option<f64>,
    /// Training JSONL from gen-train-data; each `input target` pair is added
    /// to the training texts.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// `uniform`, `ngram:<file>`, `cmd:<command>`, an http(s) URL, or a
    /// model file path.
    #[arg(long)]
    pub lm: String,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// A single query.
    #[arg(long, conflicts_with = "queries")]
    pub query: Option<String>,
    /// Query id used with --query.
    #[arg(long, default_value = "q0")]
    pub query_id: String,
    /// TSV with query_id and query text first (a qrels file works).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Titles kept by the title beam.
    #[arg(long)]
    pub titles: Option<usize>,
    /// Passages kept per title.
    #[arg(long)]
    pub passages: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Keep only the top k results per query.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Run file path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "selfret")]
    pub tag: String,
    /// Full scored results as JSONL, one line per query.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    /// Generate answers from each rank-1 passage; `query_id \t answer`.
    #[arg(long)]
    pub answers_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainKind {
    Indexing,
    Retrieval,
    Reranking,
    Rag,
    /// Retained indexing examples plus all supervised ones, shuffled.
    Mixture,
}

#[derive(Debug, Args)]
pub struct GenTrainDataArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mixture")]
    pub kind: TrainKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run file, or `-` for stdin.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "passage")]
    pub level: selfret::eval::Level,
    /// Predicted answers (`query_id \t answer`) for EM.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Query TSV, as for retrieve.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
    pub beams: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Overrides service.listen.
    #[arg(long)]
    pub listen: Option<String>,
}

/// Bad command-line usage found after parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<selfret::Error>() {
        return if e.is_data_error() { 2 } else { 3 };
    }
    if let Some(e) = err.downcast_ref::<std::io::Error>() {
        use std::io::ErrorKind::*;
        return match e.kind() {
            NotFound | InvalidData | InvalidInput | PermissionDenied => 2,
            _ => 3,
        };
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // Reader went away (`| head`); nothing left to report to.
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
