//! `unitsem` command-line pipeline. Failures print one JSON line on stderr:
//! `{"error":{"kind":...,"message":...}}`.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unitsem_core::corpus::Split;

#[derive(Debug, Parser)]
#[command(name = "unitsem", version, about = "Spoken-sentence embeddings from discovered acoustic units")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML pipeline config; defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

/// Discrete sequences for a teacher or decoder: unit corpora need their
/// codebook, token corpora their BPE model.
#[derive(Debug, Clone, Args)]
pub struct Sequences {
    #[arg(long, requires = "codebook", conflicts_with = "tokens")]
    pub units: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long, requires = "bpe")]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and dev/test pair sets.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train a k-means codebook (unless given) and write deduplicated units.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Reuse an existing codebook instead of training one.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Train BPE over units (or transcripts) and write token sequences.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "text", conflicts_with = "text")]
        units: Option<PathBuf>,
        /// TSV of `id<TAB>transcript`.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Masked-LM pretraining of a sequence encoder.
    PretrainMlm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seqs: Sequences,
    },
    /// Train the feature autoencoder on unit or token targets.
    TrainWavembed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        seqs: Sequences,
    },
    /// Train a denoising or contrastive sequence teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seqs: Sequences,
        /// Dev pairs for the Spearman metric (required for contrastive teachers).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Masked-LM checkpoint to initialise the encoder from.
        #[arg(long)]
        mlm: Option<PathBuf>,
    },
    /// Distill a frozen teacher into a feature-input student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        seqs: Sequences,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Score a model against a pair set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Which split the pair file belongs to (`dev` or `test`).
        #[arg(long, default_value = "test")]
        split: Split,
        /// Needed when the model is a sequence teacher.
        #[command(flatten)]
        seqs: Sequences,
    },
    /// Embed every utterance with a feature model and write an index.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Exact top-k cosine search.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, required_unless_present = "query_features", conflicts_with = "query_features")]
        query_id: Option<String>,
        /// Feature file to embed with `--model`.
        #[arg(long, requires = "model")]
        query_features: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    use commands as c;
    match cmd {
        Command::GenCorpus { common } => c::gen_corpus(&common),
        Command::Quantize { common, corpus, codebook } => c::quantize(&common, &corpus, codebook.as_deref()),
        Command::Tokenize { common, units, text } => c::tokenize(&common, units.as_deref(), text.as_deref()),
        Command::PretrainMlm { common, seqs } => c::pretrain_mlm(&common, &seqs),
        Command::TrainWavembed { common, corpus, seqs } => c::train_wavembed(&common, &corpus, &seqs),
        Command::TrainTeacher { common, seqs, pairs, mlm } => {
            c::train_teacher(&common, &seqs, pairs.as_deref(), mlm.as_deref())
        }
        Command::Distill { common, corpus, teacher, seqs, pairs } => c::distill(&common, &corpus, &teacher, &seqs, &pairs),
        Command::Evaluate { common, corpus, model, pairs, split, seqs } => {
            c::evaluate(&common, &corpus, &model, &pairs, split, &seqs)
        }
        Command::BuildIndex { common, corpus, model } => c::build_index(&common, &corpus, &model),
        Command::Search { common, index, query_id, query_features, model, k } => {
            c::search(&common, &index, query_id.as_deref(), query_features.as_deref(), model.as_deref(), k)
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": { "kind": kind, "message": one_line } }).to_string()
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn error_message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(core) = e.downcast_ref::<unitsem_core::Error>() {
        return core.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_line("usage", &e.to_string()));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &error_message(&e)));
            ExitCode::FAILURE
        }
    }
}
