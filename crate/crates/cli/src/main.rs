use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stillfast_cli::commands::{self, CliError, EXIT_OK};
use stillfast_cli::ExperimentConfig;
use stillfast_core::metrics::EvalSettings;

/// Short-term object interaction anticipation: train, evaluate, predict.
#[derive(Parser)]
#[command(name = "stillfast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a self-describing run directory.
    Train {
        /// TOML config; may name a `preset`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// `section.key=value`, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a prediction file against an annotation file.
    Eval {
        predictions: PathBuf,
        annotations: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.25)]
        ttc_tolerance: f64,
        /// Report file; defaults to `<predictions>.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over a dataset directory.
    Predict {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resolved config; defaults to the one stored in the checkpoint's run.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every row of an ablation table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        table: u8,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            preset,
            overrides,
            run_dir,
            resume,
        } => {
            let run = commands::cmd_train(config.as_deref(), preset.as_deref(), &overrides, &run_dir, resume.as_deref())?;
            println!("best epoch {}", run.outcome.best.epoch);
            print!("{}", run.outcome.best.val_report.table());
        }
        Command::Eval {
            predictions,
            annotations,
            k,
            iou,
            ttc_tolerance,
            out,
        } => {
            let settings = EvalSettings {
                iou_threshold: iou,
                ttc_tolerance,
                k,
            };
            let out = out.unwrap_or_else(|| predictions.with_extension("report.json"));
            let report = commands::cmd_eval(&predictions, &annotations, &settings, Some(&out))?;
            print!("{}", report.table());
        }
        Command::Predict {
            checkpoint,
            dataset,
            out,
            config,
        } => {
            let set = commands::cmd_predict(&checkpoint, &dataset, &out, config.as_deref())?;
            println!("wrote predictions for {} samples to {}", set.samples.len(), out.display());
        }
        Command::Synth { spec, n, out } => {
            let set = commands::cmd_synth(&spec, n, &out)?;
            println!("wrote {} samples to {}", set.samples.len(), out.display());
        }
        Command::Ablate {
            config,
            preset,
            overrides,
            table,
            out,
        } => {
            let base = ExperimentConfig::resolve(preset.as_deref(), config.as_deref(), &overrides)?;
            let report = commands::cmd_ablate(&base, table, &out)?;
            print!("{}", report.markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { EXIT_OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
