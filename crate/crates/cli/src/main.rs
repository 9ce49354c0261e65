//! `rce`: config-driven training and evaluation of concept models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 training divergence, 5 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rce_core::error::Error;

use commands::RunContext;

#[derive(Parser)]
#[command(name = "rce", version, about = "Concept-model training, evaluation, and explanation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics, and the codebook.
    Train(RunArgs),
    /// Classification accuracy of a checkpoint on a configured split.
    Eval(RunArgs),
    /// Intra-class concept-overlap score of a checkpoint.
    Fidelity(RunArgs),
    /// Prototype explanation for one query sample.
    Explain(RunArgs),
    /// Train every configured ablation and tabulate accuracy and fidelity.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set train.max_steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root for the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record strict-reproducibility intent in the snapshot.
    #[arg(long)]
    deterministic: bool,
}

const OUT_ROOT_ENV: &str = "RCE_OUT_ROOT";

fn build_context(args: &RunArgs) -> Result<RunContext, Error> {
    let mut cfg = config::load_config(&args.config, &args.set)?;
    if args.deterministic {
        cfg.deterministic = true;
    }
    let out_root = args
        .out
        .clone()
        .or_else(|| std::env::var(OUT_ROOT_ENV).ok().map(PathBuf::from))
        .or_else(|| cfg.output_root.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok(RunContext {
        config: cfg,
        out_root,
        applied_overrides: args.set.clone(),
    })
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let (args, f): (&RunArgs, fn(&RunContext) -> Result<(), Error>) = match &cli.command {
        Command::Train(a) => (a, commands::train),
        Command::Eval(a) => (a, commands::eval_accuracy),
        Command::Fidelity(a) => (a, commands::fidelity),
        Command::Explain(a) => (a, commands::explain),
        Command::Ablate(a) => (a, commands::ablate),
    };
    let ctx = build_context(args)?;
    f(&ctx)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, category) = match &err {
                Error::Config(_) => (2, "config"),
                Error::Data(_) => (3, "data"),
                Error::Divergence { .. } => (4, "divergence"),
                Error::Io(_) => (5, "io"),
            };
            eprintln!("error [{category}]: {err}");
            ExitCode::from(code)
        }
    }
}
