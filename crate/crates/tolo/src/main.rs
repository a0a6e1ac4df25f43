use std::path::PathBuf;
use std::process::ExitCode as ProcessExit;

use clap::{Parser, Subcommand};

use tolo::commands::{grad_check, guide, loss_eval, partition, score, CliError};
use tolo_core::layout::PartitionThresholds;
use tolo_core::schedule::GuidanceMode;

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    match s {
        "two-stage" => Ok(GuidanceMode::TwoStage),
        "one-stage" => Ok(GuidanceMode::OneStage),
        "auto" => Ok(GuidanceMode::Auto),
        other => Err(format!(
            "unknown mode '{other}' (expected two-stage, one-stage, or auto)"
        )),
    }
}

fn parse_thresholds(s: &str) -> Result<PartitionThresholds, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected LOW,HIGH".into());
    }
    let low: f64 = parts[0].trim().parse().map_err(|_| "bad LOW value")?;
    let high: f64 = parts[1].trim().parse().map_err(|_| "bad HIGH value")?;
    Ok(PartitionThresholds { low, high })
}

#[derive(Parser)]
#[command(
    name = "tolo",
    version,
    about = "Two-stage layout guidance: partition datasets, run guided denoising, evaluate losses and layout metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bucket a JSONL layout file by max pairwise IoU.
    Partition {
        /// Input layout file, one JSON layout per line.
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory for the report and the three split files.
        #[arg(long)]
        out_dir: PathBuf,
        /// Bucket boundaries LOW,HIGH (buckets: <=LOW, (LOW,HIGH], >HIGH).
        #[arg(long, value_parser = parse_thresholds, default_value = "0,0.1")]
        thresholds: PartitionThresholds,
    },
    /// Run guided denoising over one layout or a JSONL batch.
    Guide {
        /// Layout file (JSONL); every layout in it is run.
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long, default_value = "tolo-out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total denoising steps T.
        #[arg(long = "T")]
        total_steps: Option<usize>,
        /// Aggregation-stage guided steps m.
        #[arg(long)]
        m: Option<usize>,
        /// Total intervention steps n.
        #[arg(long)]
        n: Option<usize>,
        /// Loss scale.
        #[arg(long)]
        alpha: Option<f64>,
        /// Mode: two-stage, one-stage, or auto.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<GuidanceMode>,
        /// Auto-mode switch point.
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// Dump aggregated maps for every step under maps/step_{t}/.
        #[arg(long)]
        dump_maps: bool,
        /// Parallel workers for batch runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Engine geometry/dynamics config (JSON).
        #[arg(long)]
        engine_config: Option<PathBuf>,
        /// Loss weights config (JSON).
        #[arg(long)]
        loss_config: Option<PathBuf>,
        /// Re-execute a recorded manifest and verify artifact checksums.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Compare tape gradients of both losses against finite differences.
    GradCheck {
        /// Number of random instances.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Latent coordinates probed per seed (0 = all).
        #[arg(long, default_value_t = 192)]
        probe: usize,
        #[arg(long)]
        engine_config: Option<PathBuf>,
        #[arg(long)]
        loss_config: Option<PathBuf>,
    },
    /// Recompute losses from stored TOLOGRID map dumps.
    LossEval {
        /// Directory of step_{t}/concept_{i}.tolog dumps (or one step's dir).
        #[arg(long)]
        maps: PathBuf,
        /// Layout file; the first layout is used.
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        loss_config: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grade spatial/size/color cases against supplied detections.
    Score {
        /// Cases file (JSONL).
        #[arg(long)]
        cases: PathBuf,
        /// Detections file (JSONL, joined to cases by case_id).
        #[arg(long)]
        dets: PathBuf,
        /// Color table (JSON); falls back to $TOLO_COLOR_TABLE, then builtins.
        #[arg(long)]
        colors: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Partition {
            input,
            out_dir,
            thresholds,
        } => partition::run(&partition::PartitionArgs {
            input,
            out_dir,
            thresholds,
        }),
        Command::Guide {
            layout,
            out_dir,
            seed,
            total_steps,
            m,
            n,
            alpha,
            mode,
            iou_threshold,
            dump_maps,
            jobs,
            engine_config,
            loss_config,
            replay,
        } => guide::run(&guide::GuideArgs {
            layout_path: layout,
            out_dir,
            seed,
            total_steps,
            aggregation_steps: m,
            intervention_steps: n,
            alpha,
            iou_threshold,
            mode,
            dump_maps,
            jobs,
            engine_config,
            loss_config,
            replay,
        }),
        Command::GradCheck {
            seeds,
            base_seed,
            tolerance,
            step,
            probe,
            engine_config,
            loss_config,
        } => grad_check::run(&grad_check::GradCheckArgs {
            seeds,
            base_seed,
            tolerance,
            step,
            probe,
            engine_config,
            loss_config,
        }),
        Command::LossEval {
            maps,
            layout,
            loss_config,
            out,
        } => loss_eval::run(&loss_eval::LossEvalArgs {
            maps,
            layout,
            loss_config,
            out,
        }),
        Command::Score {
            cases,
            dets,
            colors,
            out,
        } => score::run(&score::ScoreArgs {
            cases,
            detections: dets,
            colors,
            out,
        }),
    }
}

fn main() -> ProcessExit {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ProcessExit::SUCCESS;
            }
            eprint!("{e}");
            return ProcessExit::from(64);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ProcessExit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ProcessExit::from(e.exit_code() as u8)
        }
    }
}
