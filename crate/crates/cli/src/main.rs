//! `eyephen`: command-line driver for the phenotyping pipeline.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "eyephen", version, about = "Diabetic eye disease phenotyping from clinical notes")]
pub struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; module seeds are derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

impl From<Format> for eyephen::evaluation::ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => eyephen::evaluation::ReportFormat::Text,
            Format::Csv => eyephen::evaluation::ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted, labelled spans.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Extract concept spans from a corpus.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        /// Pattern file replacing the built-in patterns.
        #[arg(long)]
        patterns: Option<PathBuf>,
        /// Also write per-concept ICD-10 / free-text coverage counts.
        #[arg(long)]
        stats: bool,
    },
    /// Write one annotation workbook per document.
    AnnotateGen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        spans: PathBuf,
        /// Only the first N documents with spans.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Read completed workbooks into span annotations.
    AnnotateParse {
        #[arg(long)]
        corpus: PathBuf,
        /// Workbook files or directories of workbooks.
        #[arg(required = true)]
        workbooks: Vec<PathBuf>,
        /// A second annotator's workbooks to merge against the first.
        #[arg(long)]
        second: Option<PathBuf>,
        /// Adjudication CSV (Start,End,Concept,Column,Value) for merging.
        #[arg(long)]
        resolution: Option<PathBuf>,
    },
    /// Assign patients to stratified folds.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Masked-language-model pretraining of an encoder.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "small")]
        preset: String,
        #[arg(long, default_value_t = 16)]
        d: usize,
        /// Start from this checkpoint instead of a random encoder.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train task models on one cross-validation fold and predict its test split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Registered trainer: majority, neural-frozen or neural-unfrozen.
        #[arg(long)]
        model: String,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// One task (e.g. Laterality-All); all tasks when omitted.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Score a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Full comparison of majority, frozen and unfrozen models across folds.
    Experiment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Render a fold-level results file as a report table.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Paired t-test between two columns.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<String>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command_name();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "command": name,
                "error": format!("{e:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
