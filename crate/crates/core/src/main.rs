use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fundus_core::pipeline::{split_summary, Overrides, Pipeline, PipelineConfig, Stage};
use fundus_core::Result;

/// Transfer learning and probability ensembling for fundus image classification.
#[derive(Debug, Parser)]
#[command(name = "fundus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stratified train/validation/test split of the dataset.
    Split(Common),
    /// Write augmented copies of the training images.
    Augment(Common),
    /// Extract backbone features for every split.
    Extract(Common),
    /// Train one softmax head per backbone.
    Train(Common),
    /// Score each trained head on the test split.
    Evaluate(Common),
    /// Combine model probabilities into ensemble predictions.
    Ensemble(Common),
    /// Write the summary tables and comparison chart.
    Report(Common),
    /// All stages.
    Run(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, default_value = "pipeline.toml")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; runs go under `<out>/runs/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these backbones (repeatable).
    #[arg(long = "backbone")]
    backbones: Vec<String>,
    /// Recompute every stage regardless of the ledger.
    #[arg(long)]
    force: bool,
}

fn execute(stage: Stage, args: Common) -> Result<()> {
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        backbones: args.backbones,
        ..Default::default()
    };
    let config = PipelineConfig::load(&args.config, |k| std::env::var(k).ok(), &overrides)?;
    let mut pipeline = Pipeline::open(config, args.force)?;
    pipeline.run_until(stage)?;
    if stage == Stage::Split {
        print!("{}", split_summary(&pipeline.split_manifest()?));
    }
    for outcome in pipeline.outcomes() {
        let status = if outcome.executed { "done" } else { "up to date" };
        eprintln!("{:<28} {status}", outcome.stage);
    }
    println!("{}", pipeline.run_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (stage, args) = match cli.command {
        Command::Split(a) => (Stage::Split, a),
        Command::Augment(a) => (Stage::Augment, a),
        Command::Extract(a) => (Stage::Extract, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::Ensemble(a) => (Stage::Ensemble, a),
        Command::Report(a) => (Stage::Report, a),
        Command::Run(a) => (Stage::Report, a),
    };
    match execute(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
