//! Binary entry point: clap surface over the command implementations.
//! Flags override the config file; every value is resolved through
//! [`qpeft_cli::Settings`] so provenance lands in the run log.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qpeft_cli::Settings;

#[derive(Parser)]
#[command(
    name = "qpeft",
    about = "Desk-scale query-likelihood reranking with trained soft hints",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic corpus, query splits, qrels, and answers.
    Synth(CommonFlags),
    /// Build the token vocabulary from a corpus and query files.
    BuildVocab(CommonFlags),
    /// Pretrain the miniature language model and write its checkpoint.
    PretrainLm(CommonFlags),
    /// Build the inverted index and write it as a text artifact.
    Index(CommonFlags),
    /// Run BM25 retrieval for a query file, writing a run file.
    Retrieve(CommonFlags),
    /// Train the hint module against the frozen language model.
    Train(CommonFlags),
    /// Rescore and reorder a candidate run with a trained or plain scorer.
    Rerank(CommonFlags),
    /// Compute metrics, improvements, and significance for run files.
    Eval(CommonFlags),
    /// Compare analytic gradients against finite differences on both variants.
    Gradcheck(CommonFlags),
    /// Train across variants, prompts, training sizes, and seeds; write sweep.csv.
    Sweep(CommonFlags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::BuildVocab(_) => "build-vocab",
            Command::PretrainLm(_) => "pretrain-lm",
            Command::Index(_) => "index",
            Command::Retrieve(_) => "retrieve",
            Command::Train(_) => "train",
            Command::Rerank(_) => "rerank",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Sweep(_) => "sweep",
        }
    }

    fn flags(&self) -> &CommonFlags {
        match self {
            Command::Synth(f)
            | Command::BuildVocab(f)
            | Command::PretrainLm(f)
            | Command::Index(f)
            | Command::Retrieve(f)
            | Command::Train(f)
            | Command::Rerank(f)
            | Command::Eval(f)
            | Command::Gradcheck(f)
            | Command::Sweep(f) => f,
        }
    }
}

/// The shared flag surface. Every flag overrides the config-file key of the
/// same name; unset flags leave the config or default value in place.
#[derive(Args)]
struct CommonFlags {
    /// Plain-text key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (the only place commands write).
    #[arg(long)]
    out: Option<String>,
    /// Hint variant: r (token selection) or a (cross-attention).
    #[arg(long)]
    variant: Option<String>,
    /// Document tokens kept by variant r.
    #[arg(long)]
    k: Option<usize>,
    /// Attention heads in the variant-a hint module.
    #[arg(long)]
    heads: Option<usize>,
    /// Affine layers in the hint MLP.
    #[arg(long = "mlp-layers")]
    mlp_layers: Option<usize>,
    /// Learning rate for hint training.
    #[arg(long)]
    lr: Option<f64>,
    /// Queries per training batch.
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Maximum training epochs.
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    /// Non-improving epochs tolerated before early stop.
    #[arg(long)]
    patience: Option<usize>,
    /// Prompt preset: p1..p5.
    #[arg(long)]
    prompt: Option<String>,
    /// Retrieval / rerank depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Score aggregation: sum or mean.
    #[arg(long = "score-mode")]
    score_mode: Option<String>,
    /// Root random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// BM25 term-frequency saturation.
    #[arg(long)]
    k1: Option<f64>,
    /// BM25 length normalization.
    #[arg(long)]
    b: Option<f64>,
    /// Comma-separated training sizes for the sweep.
    #[arg(long = "train-sizes")]
    train_sizes: Option<String>,
    /// In-context exemplar for the plain baseline: none or first.
    #[arg(long)]
    exemplar: Option<String>,
}

impl CommonFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out: Vec<(&'static str, String)> = Vec::new();
        let mut push = |key: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((key, v));
            }
        };
        push("out", self.out.clone());
        push("variant", self.variant.clone());
        push("k", self.k.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        push("mlp-layers", self.mlp_layers.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("batch-size", self.batch_size.map(|v| v.to_string()));
        push("max-epochs", self.max_epochs.map(|v| v.to_string()));
        push("patience", self.patience.map(|v| v.to_string()));
        push("prompt", self.prompt.clone());
        push("depth", self.depth.map(|v| v.to_string()));
        push("score-mode", self.score_mode.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("k1", self.k1.map(|v| v.to_string()));
        push("b", self.b.map(|v| v.to_string()));
        push("train-sizes", self.train_sizes.clone());
        push("exemplar", self.exemplar.clone());
        out
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let flags = cli.command.flags();
    let result = Settings::resolve(
        cli.command.name(),
        flags.config.as_deref(),
        &flags.pairs(),
    )
    .and_then(|settings| qpeft_cli::run(&settings));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
