//! `tksg`: synthetic data generation, vocabulary and index building,
//! training, generation, retrieval, evaluation and grid sweeps.
//!
//! Every subcommand reads a run configuration (`--config FILE`, JSON) and
//! accepts `--<field> <value>` for any configuration field.

mod commands;
mod overrides;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "tksg", version, about = "Topic-keyword guided report generation")]
struct Cli {
    /// Run configuration (JSON). Defaults to the desk-scale profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic planted-structure corpus.
    GenSynth(commands::GenSynthArgs),
    /// Build the report vocabulary and concept vocabulary from the training split.
    BuildVocab,
    /// Build the retrieval index from the training split's report embeddings.
    BuildIndex(commands::BuildIndexArgs),
    /// Train a model; resumes an interrupted run in the same run directory.
    Train,
    /// Generate reports for one split from the best checkpoint.
    Generate(commands::GenerateArgs),
    /// List the top-k retrieved reports per query.
    Retrieve(commands::RetrieveArgs),
    /// Score generated reports against the corpus references.
    Evaluate(commands::EvaluateArgs),
    /// Train and evaluate over an N_R x N_K grid.
    Sweep(commands::SweepArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, pairs) = overrides::split_args(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            return fail(first.strip_prefix("error: ").unwrap_or(first));
        }
    };
    let result = commands::load_config(cli.config.as_deref(), &pairs).and_then(|config| match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&config, a),
        Command::BuildVocab => commands::build_vocab(&config),
        Command::BuildIndex(a) => commands::build_index(&config, a),
        Command::Train => commands::train(&config),
        Command::Generate(a) => commands::generate(&config, a),
        Command::Retrieve(a) => commands::retrieve(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::Sweep(a) => commands::sweep(&config, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&format!("{e:#}")),
    }
}

/// Reports an error as one JSON line on stderr.
fn fail(msg: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": msg }));
    ExitCode::FAILURE
}
