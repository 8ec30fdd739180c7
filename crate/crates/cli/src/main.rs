use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_lab::compare::{compare, expert_usage, render_csv, render_text};
use moe_lab::sweep::{resolve_out, run};
use moe_lab::{CliError, ExperimentConfig};

/// Mixture-of-experts experiment runner.
///
/// Exit codes: 0 success, 1 other failure, 2 invalid config, usage or
/// malformed report, 3 non-finite loss, 4 missing dataset files,
/// 5 output directory already exists.
#[derive(Parser)]
#[command(name = "moe-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`, then runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
    /// Concurrent runs (default: one per core).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep a config describes.
    Run(SweepArgs),
    /// Distill an attentive-gated checkpoint into a softmax-gated mixture.
    Distill {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Attentive-gated source checkpoint, replacing the config's
        /// `source_checkpoint`.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Tabulate test error, I(E;Y), H_s and H_u of two or more reports or
    /// sweep summaries.
    Compare {
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Count experts receiving at least `threshold` of the routed test samples.
    ExpertUsage {
        report: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
    },
}

fn load_config(args: &SweepArgs, source: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config: {e}")))?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(src) = source {
        cfg.source_checkpoint = Some(src.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(args: &SweepArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = resolve_out(cfg, args.out.as_deref());
    let summary = run(cfg, &out, args.overwrite, args.threads)?;
    let best = summary.selected_run();
    println!(
        "{}: selected {} seed {} (train error {:.4}, test error {:.4}); test error {:.4} ± {:.4} over seeds",
        summary.name,
        best.point,
        best.seed,
        best.train_error,
        best.test_error,
        summary.test_error_mean,
        summary.test_error_std
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args, None)?;
            sweep(&args, &cfg)
        }
        Command::Distill { sweep: args, source } => {
            let cfg = load_config(&args, source.as_deref())?;
            if !cfg.kind.is_distill() {
                return Err(CliError::Config(format!(
                    "kind: distill needs distill_from_importance or distill_from_Ls, got {}",
                    cfg.kind
                )));
            }
            sweep(&args, &cfg)
        }
        Command::Compare { reports, csv } => {
            let rows = compare(&reports)?;
            print!("{}", render_text(&rows));
            if let Some(path) = csv {
                std::fs::write(&path, render_csv(&rows)).map_err(|source| CliError::Io { path, source })?;
            }
            Ok(())
        }
        Command::ExpertUsage { report, threshold } => {
            println!("{}", expert_usage(&report, threshold)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
