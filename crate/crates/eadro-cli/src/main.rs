//! Command-line front end tying the pipeline stages into reproducible runs.
//!
//! One structured config file drives every subcommand; flags override file
//! values, and each stage stamps a hash of the resolved config into its
//! manifest. Exit codes: 0 ok, 1 usage/config, 2 data error, 3 numeric
//! failure.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eadro_core::error::Error;
use eadro_core::model::Variant;
use eadro_core::pipeline::{
    checkpoint_name, run_evaluate, run_featurize, run_simulate, run_train, run_troubleshoot,
    EvaluateArgs, TrainArgs, TroubleshootArgs,
};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "eadro",
    version,
    about = "Joint anomaly detection and root-cause localization over simulated microservice telemetry"
)]
struct Cli {
    /// Structured config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate telemetry NDJSON files plus ground-truth labels.
    Simulate {
        /// Output directory for the four NDJSON files and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn raw telemetry into a featurized dataset and fitted artifacts.
    Featurize {
        /// Directory holding the simulate outputs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the dataset's time split.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model variant: full, drop-logs, drop-kpis, drop-traces, no-graph.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Score a checkpoint on the test split and print the metric table.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Judge one window of raw telemetry with a trained model.
    Troubleshoot {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        kpis: PathBuf,
        /// Window start timestamp in microseconds.
        #[arg(long, default_value_t = 0)]
        window_start_us: u64,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Retrain and evaluate an ablation variant on the same dataset.
    Ablate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// drop-logs, drop-kpis, drop-traces or no-graph.
        #[arg(long)]
        variant: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit 2 on its own; usage problems are exit 1 here
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                Error::NonFinite(_) | Error::Numeric(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> eadro_core::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let hash = cfg.hash()?;

    match cli.command {
        Command::Simulate { out } => {
            let args = cfg.simulate_args(Some(hash))?;
            let manifest = run_simulate(&args, &out)?;
            println!(
                "simulated {} services, {} faults, {}s into {}",
                args.topology.services.len(),
                args.schedule.faults.len(),
                args.sim.duration_s,
                out.display()
            );
            println!("manifest: {}", serde_json::to_string(&manifest.details)?);
        }
        Command::Featurize { data, out } => {
            let summary = run_featurize(&cfg.featurize_args(Some(hash)), &data, &out)?;
            println!(
                "featurized {} windows ({} abnormal), {} services, {} event types, train end {}",
                summary.windows,
                summary.abnormal_windows,
                summary.services.len(),
                summary.event_types,
                summary.train_window_end
            );
        }
        Command::Train {
            features,
            out,
            variant,
        } => {
            let variant = Variant::parse(&variant)?;
            let summary = run_train(
                &TrainArgs {
                    train: cfg.train_config(),
                    variant,
                    config_hash: Some(hash),
                },
                &features,
                &out,
            )?;
            println!(
                "trained {}: loss {:.4} -> {:.4} over {} epochs; train {}/{} abnormal, test {}/{}",
                variant.name(),
                summary.history.first().copied().unwrap_or(f32::NAN),
                summary.history.last().copied().unwrap_or(f32::NAN),
                summary.history.len(),
                summary.split.train_abnormal,
                summary.split.train_total,
                summary.split.test_abnormal,
                summary.split.test_total,
            );
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Evaluate {
            features,
            checkpoint,
            out,
            variant,
        } => {
            let variant = Variant::parse(&variant)?;
            let report = run_evaluate(
                &EvaluateArgs {
                    variant,
                    split_ratio: cfg.train_config().split_ratio,
                    eval_batch: cfg.evaluate.batch,
                },
                &features,
                &checkpoint,
                &out,
            )?;
            print!("{}", report.render_table());
        }
        Command::Troubleshoot {
            features,
            checkpoint,
            traces,
            logs,
            kpis,
            window_start_us,
            variant,
        } => {
            let variant = Variant::parse(&variant)?;
            let verdict = run_troubleshoot(
                &TroubleshootArgs {
                    window: cfg.window,
                    logparse: cfg.logparse.clone(),
                    variant,
                    window_start_us,
                },
                &features,
                &checkpoint,
                &traces,
                &logs,
                &kpis,
            )?;
            print!("{}", verdict.render());
        }
        Command::Ablate {
            features,
            out,
            variant,
        } => {
            let variant = Variant::parse(&variant)?;
            let summary = run_train(
                &TrainArgs {
                    train: cfg.train_config(),
                    variant,
                    config_hash: Some(hash),
                },
                &features,
                &out,
            )?;
            let report = run_evaluate(
                &EvaluateArgs {
                    variant,
                    split_ratio: cfg.train_config().split_ratio,
                    eval_batch: cfg.evaluate.batch,
                },
                &features,
                &summary.checkpoint,
                &out,
            )?;
            println!("variant {} ({})", variant.name(), checkpoint_name(variant));
            print!("{}", report.render_table());
        }
    }
    Ok(())
}
