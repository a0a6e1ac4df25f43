//! `tolo grad-check`: tape gradients vs central finite differences.

use std::path::PathBuf;

use tolo_core::attention::EngineConfig;
use tolo_core::gradcheck::check_seeds;
use tolo_core::losses::LossWeights;

use super::{load_config_or_default, CliError};

#[derive(Debug, Clone)]
pub struct GradCheckArgs {
    pub seeds: u64,
    pub base_seed: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Latent coordinates differenced per seed; 0 means all of them.
    pub probe: usize,
    pub engine_config: Option<PathBuf>,
    pub loss_config: Option<PathBuf>,
}

impl Default for GradCheckArgs {
    fn default() -> Self {
        GradCheckArgs {
            seeds: 20,
            base_seed: 0,
            tolerance: 1e-3,
            step: 1e-3,
            probe: 192,
            engine_config: None,
            loss_config: None,
        }
    }
}

pub fn run(args: &GradCheckArgs) -> Result<(), CliError> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if !(args.step > 0.0 && args.step.is_finite()) {
        return Err(CliError::Usage(format!("--step must be positive, got {}", args.step)));
    }
    if !(args.tolerance >= 0.0) {
        return Err(CliError::Usage(format!(
            "--tolerance must be non-negative, got {}",
            args.tolerance
        )));
    }
    let engine: EngineConfig = load_config_or_default(args.engine_config.as_deref())?;
    let weights: LossWeights = load_config_or_default(args.loss_config.as_deref())?;

    let report = check_seeds(
        &engine,
        &weights,
        args.base_seed,
        args.seeds,
        args.step,
        args.probe,
    )?;
    for check in &report.checks {
        println!(
            "seed {}: aggregation {:.3e}  separation {:.3e}",
            check.seed, check.rel_aggregation, check.rel_separation
        );
    }
    println!("max relative error {:.6e}", report.max_rel);

    if report.max_rel <= args.tolerance {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {:.6e} exceeds tolerance {:.6e}",
            report.max_rel, args.tolerance
        )))
    }
}
