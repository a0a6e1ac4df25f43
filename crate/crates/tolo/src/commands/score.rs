//! `tolo score`: grade spatial/size/color cases against supplied detections.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tolo_core::metrics::{
    check_color, check_size, check_spatial, score_outcomes, CaseOutcome, CheckResult, ColorTable,
    Detection, ScoreReport, SpatialRelation,
};

use super::{load_config_or_default, read_jsonl, write_json, CliError};
use crate::formats::ppm;

#[derive(Debug, Clone)]
pub struct ScoreArgs {
    pub cases: PathBuf,
    pub detections: PathBuf,
    pub colors: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ColorExpectation {
    pub label: String,
    pub color: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CaseSpec {
    Spatial {
        subject: String,
        relation: SpatialRelation,
        object: String,
    },
    Size {
        /// Labels in strictly decreasing area order, largest first.
        order: Vec<String>,
    },
    Color {
        expect: Vec<ColorExpectation>,
        /// P6 image path, relative to the cases file.
        image: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
pub struct Case {
    pub id: String,
    #[serde(default)]
    pub bucket: Option<String>,
    #[serde(flatten)]
    pub spec: CaseSpec,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DetectionRecord {
    pub case_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureLine {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreOutput {
    #[serde(flatten)]
    pub report: ScoreReport,
    pub failures: Vec<FailureLine>,
}

fn evaluate_case(
    case: &Case,
    detections: &[Detection],
    cases_dir: &Path,
    table: &ColorTable,
) -> Result<CheckResult, CliError> {
    match &case.spec {
        CaseSpec::Spatial {
            subject,
            relation,
            object,
        } => Ok(check_spatial(subject, *relation, object, detections)),
        CaseSpec::Size { order } => {
            check_size(order, detections).map_err(|e| CliError::Format(e.to_string()))
        }
        CaseSpec::Color { expect, image } => {
            let image = ppm::read_image(&cases_dir.join(image))?;
            let expectations: Vec<(String, String)> = expect
                .iter()
                .map(|e| (e.label.clone(), e.color.clone()))
                .collect();
            check_color(&expectations, detections, &image, table)
                .map_err(|e| CliError::Format(e.to_string()))
        }
    }
}

/// Color table resolution order: --colors flag, then TOLO_COLOR_TABLE, then
/// the built-in defaults.
fn resolve_color_table(flag: Option<&Path>) -> Result<ColorTable, CliError> {
    let path = match flag {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os("TOLO_COLOR_TABLE").map(PathBuf::from),
    };
    let table: ColorTable = load_config_or_default(path.as_deref())?;
    table
        .validate()
        .map_err(|e| CliError::Format(e.to_string()))?;
    Ok(table)
}

pub fn run(args: &ScoreArgs) -> Result<(), CliError> {
    let cases: Vec<Case> = read_jsonl(&args.cases)?;
    if cases.is_empty() {
        return Err(CliError::Format(format!(
            "{}: no cases",
            args.cases.display()
        )));
    }
    let det_records: Vec<DetectionRecord> = read_jsonl(&args.detections)?;
    let dets_by_case: HashMap<&str, &[Detection]> = det_records
        .iter()
        .map(|r| (r.case_id.as_str(), r.detections.as_slice()))
        .collect();
    let table = resolve_color_table(args.colors.as_deref())?;
    let cases_dir = args
        .cases
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut outcomes = Vec::with_capacity(cases.len());
    let mut failures = Vec::new();
    for case in &cases {
        let result = match dets_by_case.get(case.id.as_str()) {
            Some(dets) => evaluate_case(case, dets, &cases_dir, &table)?,
            None => CheckResult {
                pass: false,
                reason: Some("no detections supplied".into()),
            },
        };
        if !result.pass {
            failures.push(FailureLine {
                id: case.id.clone(),
                reason: result
                    .reason
                    .clone()
                    .unwrap_or_else(|| "check failed".into()),
            });
        }
        outcomes.push(CaseOutcome {
            id: case.id.clone(),
            bucket: case.bucket.clone(),
            pass: result.pass,
            reason: result.reason,
        });
    }

    let output = ScoreOutput {
        report: score_outcomes(&outcomes),
        failures,
    };
    match &args.out {
        Some(path) => write_json(path, &output)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&output).expect("serializable")
        ),
    }
    Ok(())
}
