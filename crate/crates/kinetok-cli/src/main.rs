//! `kinetok` — pipeline driver.
//!
//! One subcommand per stage, in dependency order: enrich, tokenize, train,
//! backtest, sweep, diagnose. Every subcommand takes `--config` plus
//! optional `--seed` / `--out` overrides. Exit codes are stable per error
//! class so scripts can branch on them: 0 success, 1 I/O, 2 config,
//! 3 parse, 4 data/validation, 5 leakage, 6 numerical, 7 missing
//! dependency artifact.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kinetok::config::load_run_config;
use kinetok::pipeline::{run_pipeline, PipelineCommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "kinetok",
    version,
    about = "Spline-enriched kinematic tokens, a small causal transformer, and a tax-aware backtester"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest or generate candles, log-transform, and fit the enrichment splines.
    Enrich(StageArgs),
    /// Build anchored training windows and freeze normalization statistics.
    Tokenize(StageArgs),
    /// Train the action classifier on the tokenized windows.
    Train(StageArgs),
    /// Run the trained policy through the cash/long simulator on the test window.
    Backtest(StageArgs),
    /// Re-label and re-simulate across the dead-band and cost axes.
    Sweep(StageArgs),
    /// Equilibrium detection, confusion matrix, and calibration reports.
    Diagnose(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the run seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run(stage: PipelineCommand, args: &StageArgs) -> anyhow::Result<()> {
    let mut config = load_run_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    config.apply_overrides(args.seed, args.out.clone());
    let report = run_pipeline(&config, stage)?;
    println!("stage {stage}: ok");
    for (k, v) in &report.summary {
        println!("  {k}: {v}");
    }
    println!(
        "  artifacts: {} files under {}",
        report.artifacts.len(),
        config.output_dir.join(stage.name()).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match &cli.command {
        Command::Enrich(a) => (PipelineCommand::Enrich, a),
        Command::Tokenize(a) => (PipelineCommand::Tokenize, a),
        Command::Train(a) => (PipelineCommand::Train, a),
        Command::Backtest(a) => (PipelineCommand::Backtest, a),
        Command::Sweep(a) => (PipelineCommand::Sweep, a),
        Command::Diagnose(a) => (PipelineCommand::Diagnose, a),
    };
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<kinetok::Error>()
                .map(kinetok::Error::exit_code)
                .unwrap_or(1);
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}
