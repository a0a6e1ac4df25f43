//! `tolo loss-eval`: recompute losses from stored map dumps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tolo_core::grid::Tape;
use tolo_core::layout::Layout;
use tolo_core::losses::{
    aggregation_loss, boundary_loss, concept_from_map, rasterize_box, region_loss,
    separation_loss, LossWeights,
};
use tolo_core::schedule::{step_pair_overlaps, PairOverlap};
use tolo_core::{Grid2D, MAP_SIZE};

use super::{load_config_or_default, read_jsonl, write_json, CliError};
use crate::formats::tolog;

#[derive(Debug, Clone)]
pub struct LossEvalArgs {
    pub maps: PathBuf,
    pub layout: PathBuf,
    pub loss_config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptReport {
    pub tau: f64,
    pub iou: f64,
    pub region: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub per_concept: Vec<ConceptReport>,
    pub l_agg: f64,
    pub l_sep: f64,
    pub pair_overlaps: Vec<PairOverlap>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossEvalReport {
    pub layout_id: String,
    pub steps: Vec<StepReport>,
}

/// Step directories under `maps/` (named `step_{t}`), ordered by descending
/// timestep like the run itself; a directory holding the concept files
/// directly is treated as a single unnamed step.
fn discover_steps(maps_dir: &Path) -> Result<Vec<(Option<usize>, PathBuf)>, CliError> {
    let mut steps = Vec::new();
    for entry in fs::read_dir(maps_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", maps_dir.display())))?
    {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(t) = name.strip_prefix("step_") {
            if entry.file_type()?.is_dir() {
                let t: usize = t.parse().map_err(|_| {
                    CliError::Format(format!("bad step directory name '{name}'"))
                })?;
                steps.push((Some(t), entry.path()));
            }
        }
    }
    if steps.is_empty() {
        return Ok(vec![(None, maps_dir.to_path_buf())]);
    }
    steps.sort_by(|a, b| b.0.cmp(&a.0));
    Ok(steps)
}

fn read_concept_maps(dir: &Path, count: usize) -> Result<Vec<Grid2D>, CliError> {
    let mut maps = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("concept_{i}.tolog"));
        if !path.exists() {
            return Err(CliError::Format(format!(
                "{}: expected {count} concept maps, missing concept_{i}.tolog",
                dir.display()
            )));
        }
        maps.push(tolog::read_grid(&path)?);
    }
    Ok(maps)
}

pub fn evaluate_step(
    maps: Vec<Grid2D>,
    box_masks: &[Grid2D],
    weights: &LossWeights,
    step: Option<usize>,
) -> Result<StepReport, CliError> {
    let mut tape = Tape::new();
    let mut concepts = Vec::with_capacity(maps.len());
    let mut per_concept = Vec::with_capacity(maps.len());
    for (map, box_mask) in maps.into_iter().zip(box_masks) {
        let (concept, analysis) = concept_from_map(&mut tape, map, box_mask, weights)
            .map_err(|e| CliError::Format(e.to_string()))?;
        let region = region_loss(&mut tape, &concept, box_mask, weights)
            .map_err(|e| CliError::Format(e.to_string()))?
            .scalar_value()
            .expect("scalar");
        let boundary = boundary_loss(&mut tape, &concept, box_mask)
            .map_err(|e| CliError::Format(e.to_string()))?
            .scalar_value()
            .expect("scalar");
        per_concept.push(ConceptReport {
            tau: analysis.tau,
            iou: analysis.iou,
            region,
            boundary,
        });
        concepts.push(concept);
    }
    let l_agg = aggregation_loss(&mut tape, &concepts, box_masks, weights)
        .map_err(|e| CliError::Format(e.to_string()))?
        .scalar_value()
        .expect("scalar");
    let l_sep = separation_loss(&mut tape, &concepts, weights)
        .map_err(|e| CliError::Format(e.to_string()))?
        .scalar_value()
        .expect("scalar");
    Ok(StepReport {
        step,
        per_concept,
        l_agg,
        l_sep,
        pair_overlaps: step_pair_overlaps(&concepts, weights.eps),
    })
}

pub fn run(args: &LossEvalArgs) -> Result<(), CliError> {
    let layouts: Vec<Layout> = read_jsonl(&args.layout)?;
    let layout = layouts
        .first()
        .ok_or_else(|| CliError::Format(format!("{}: no layouts", args.layout.display())))?;
    let weights: LossWeights = load_config_or_default(args.loss_config.as_deref())?;
    let box_masks: Vec<Grid2D> = layout
        .boxes
        .iter()
        .map(|b| rasterize_box(b, MAP_SIZE))
        .collect();

    let mut steps = Vec::new();
    for (step, dir) in discover_steps(&args.maps)? {
        let maps = read_concept_maps(&dir, layout.num_concepts())?;
        steps.push(evaluate_step(maps, &box_masks, &weights, step)?);
    }
    let report = LossEvalReport {
        layout_id: layout.id.clone(),
        steps,
    };

    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("serializable")),
    }
    Ok(())
}
