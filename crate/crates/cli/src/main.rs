use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recon_core::pipeline::{audit, run_stage, Overrides, PipelineError, Stage};

/// Forecast index additions and removals from a firm-quarter panel.
#[derive(Parser, Debug)]
#[command(name = "recon", version)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic panel plus announcements and prices.
    Synth,
    /// Build the feature matrix with imputation and pruning reports.
    Features,
    /// Fit logistic regression, random forest and linear SVC.
    Train,
    /// Chronological split, grid search and model scores.
    Evaluate,
    /// Shapley summary and per-row attributions for the tuned forest.
    Explain,
    /// Announcement event-study statistics.
    Events,
    /// Long/short backtest of predicted transitions.
    Backtest,
    /// Every stage in order.
    Pipeline,
    /// Check an output directory's files against its manifest.
    Audit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let overrides = Overrides { seed: cli.seed, out_dir: cli.out_dir.clone() };
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::Features => Stage::Features,
        Command::Train => Stage::Train,
        Command::Evaluate => Stage::Evaluate,
        Command::Explain => Stage::Explain,
        Command::Events => Stage::Events,
        Command::Backtest => Stage::Backtest,
        Command::Pipeline => Stage::Pipeline,
        Command::Audit => return run_audit(&cli, &overrides),
    };
    match run_stage(cli.config.as_deref(), &overrides, stage) {
        Ok(manifest) => {
            println!(
                "{}: {} files recorded, config {}",
                stage.name(),
                manifest.files.len(),
                &manifest.config_hash[..12]
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run_audit(cli: &Cli, overrides: &Overrides) -> ExitCode {
    let dir = match (&overrides.out_dir, &cli.config) {
        (Some(d), _) => d.clone(),
        (None, Some(path)) => match recon_core::pipeline::RunConfig::load(path) {
            Ok(c) => c.out_dir,
            Err(e) => return fail(&e),
        },
        (None, None) => recon_core::pipeline::RunConfig::default().out_dir,
    };
    match audit(&dir) {
        Ok(r) if r.passed() => {
            println!("audit: {} files consistent with config {}", r.files_checked, &r.config_hash[..12]);
            ExitCode::SUCCESS
        }
        Ok(r) => {
            for p in &r.problems {
                eprintln!("audit: {p}");
            }
            ExitCode::from(3)
        }
        Err(e) => fail(&e),
    }
}
