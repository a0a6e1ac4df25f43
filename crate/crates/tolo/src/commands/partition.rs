//! `tolo partition`: bucket a layout file by max pairwise IoU.

use std::fs;
use std::path::PathBuf;

use tolo_core::layout::{partition, Bucket, Layout, PartitionThresholds};

use super::{read_jsonl, write_json, write_jsonl, CliError};

#[derive(Debug, Clone)]
pub struct PartitionArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub thresholds: PartitionThresholds,
}

pub fn run(args: &PartitionArgs) -> Result<(), CliError> {
    if !args.thresholds.is_valid() {
        return Err(CliError::Usage(format!(
            "thresholds must satisfy 0 <= low < high, got {},{}",
            args.thresholds.low, args.thresholds.high
        )));
    }
    let layouts: Vec<Layout> = read_jsonl(&args.input)?;
    let report = partition(&layouts, args.thresholds)
        .map_err(|e| CliError::Format(e.to_string()))?;

    fs::create_dir_all(&args.out_dir)?;
    write_json(&args.out_dir.join("report.json"), &report)?;

    let mut split: [Vec<&Layout>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for assignment in &report.assignments {
        split[assignment.bucket as usize].push(&layouts[assignment.index]);
    }
    for (bucket, name) in [
        (Bucket::Zero, "zero.jsonl"),
        (Bucket::Low, "low.jsonl"),
        (Bucket::High, "high.jsonl"),
    ] {
        write_jsonl(&args.out_dir.join(name), &split[bucket as usize])?;
    }

    println!(
        "partitioned {} layouts: zero={} low={} high={} rejected={}",
        layouts.len(),
        report.counts[0],
        report.counts[1],
        report.counts[2],
        report.rejected.len()
    );
    Ok(())
}
