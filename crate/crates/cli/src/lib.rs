//! `nsft` command-line driver. Every subcommand is deterministic in its
//! inputs and `--seed`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

mod commands;

/// Exit status for a runtime failure. Usage errors exit with 2.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "nsft",
    version,
    about = "Negative supervised finetuning experiments on a synthetic caption world"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the loss-identity, gradient and ratio invariant suite.
    CheckTheory(CheckTheoryArgs),
    /// Generate a synthetic preference dataset as JSON lines.
    GenWorld(GenWorldArgs),
    /// Identify errors and build corrective conversations.
    Construct(ConstructArgs),
    /// Train one method from a pretrained (or given) base model.
    Train(TrainArgs),
    /// Train several methods from a shared base and report held-out metrics.
    Compare(CompareArgs),
    /// CHAIR scores of a checkpoint's captions, or of pre-split captions.
    Chair(ChairArgs),
    /// Mean and best/worst-10 aggregates of judge scores.
    AggregateScores(AggregateArgs),
}

#[derive(Debug, Args)]
pub struct CheckTheoryArgs {
    /// Random instances per model-level identity.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1, value_parser = positive)]
    pub beta: f64,
    /// Also write the result lines here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// World settings (JSON or TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    /// Samples from `gen-world`; generated from `--n` and `--seed` when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Construction options (JSON or TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the constructed conversations as LLaVA records.
    #[arg(long)]
    pub llava: Option<PathBuf>,
    /// Chat-completions endpoint; the rule oracle is used when absent. The
    /// bearer token is read from `NSFT_LLM_TOKEN`.
    #[arg(long)]
    pub llm_endpoint: Option<String>,
    #[arg(long, default_value = "gpt-4")]
    pub llm_model: String,
    /// JSON-lines log of every LLM attempt.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (JSON or TOML); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preference samples used for alignment.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = non_negative)]
    pub kl_weight: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, value_parser = method)]
    pub method: nsft_core::train::Method,
    /// Start from this checkpoint instead of pretraining.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Methods to compare, comma separated; the config's list otherwise.
    #[arg(long, value_delimiter = ',', value_parser = method)]
    pub method: Vec<nsft_core::train::Method>,
}

#[derive(Debug, Args)]
pub struct ChairArgs {
    /// Checkpoint whose greedy captions are scored on held-out scenes.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub checkpoint: Option<PathBuf>,
    /// JSON lines of `{sentences: [[object, ...], ...], ground_truth: [object, ...]}`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `.csv` for a CSV row, JSON otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Score sheet: JSON `{items: [...]}` or JSON lines of items.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a non-negative number")),
    }
}

fn method(s: &str) -> Result<nsft_core::train::Method, String> {
    s.parse().map_err(|e: nsft_core::Error| e.to_string())
}

/// Reads a JSON or TOML config, chosen by extension.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        _ => bail!("config {} must end in .json or .toml", path.display()),
    }
}

/// One-line JSON description of a failure, printed to stderr.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<nsft_core::Error>())
        .map_or("runtime", nsft_core::Error::kind);
    // some errors already print their source; keep each cause once
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    let message = parts.join(": ");
    serde_json::json!({"error": {"kind": kind, "message": message}}).to_string()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CheckTheory(a) => commands::check_theory(&a),
        Command::GenWorld(a) => commands::gen_world(&a),
        Command::Construct(a) => commands::construct(&a),
        Command::Train(a) => commands::train(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Chair(a) => commands::chair(&a),
        Command::AggregateScores(a) => commands::aggregate_scores(&a),
    }
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            EXIT_RUNTIME
        }
    }
}
