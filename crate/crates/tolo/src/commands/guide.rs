//! `tolo guide`: run the guided denoising loop over one layout or a batch,
//! writing traces, maps, renders, and a re-executable manifest per run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use tolo_core::attention::{AttentionEngine, EngineConfig, Latent};
use tolo_core::grid::Tape;
use tolo_core::layout::Layout;
use tolo_core::losses::LossWeights;
use tolo_core::schedule::{run as run_schedule, GuidanceConfig, GuidanceMode, RunOptions};
use tolo_core::Grid2D;

use super::{load_config_or_default, read_jsonl, write_jsonl, CliError};
use crate::formats::{pgm, tolog};
use crate::manifest::{sha256_file, write_manifest, Artifact, RunManifest};

#[derive(Debug, Clone, Default)]
pub struct GuideArgs {
    pub layout_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub total_steps: Option<usize>,
    pub aggregation_steps: Option<usize>,
    pub intervention_steps: Option<usize>,
    pub alpha: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub mode: Option<GuidanceMode>,
    pub dump_maps: bool,
    pub jobs: usize,
    pub engine_config: Option<PathBuf>,
    pub loss_config: Option<PathBuf>,
    pub replay: Option<PathBuf>,
}

pub fn run(args: &GuideArgs) -> Result<(), CliError> {
    if let Some(manifest_path) = &args.replay {
        return replay(args, manifest_path);
    }
    let layout_path = args
        .layout_path
        .as_ref()
        .ok_or_else(|| CliError::Usage("--layout is required unless --replay is given".into()))?;
    let layouts: Vec<Layout> = read_jsonl(layout_path)?;
    if layouts.is_empty() {
        return Err(CliError::Format(format!(
            "{}: no layouts",
            layout_path.display()
        )));
    }

    let engine: EngineConfig = load_config_or_default(args.engine_config.as_deref())?;
    let weights: LossWeights = load_config_or_default(args.loss_config.as_deref())?;
    let mut guidance = GuidanceConfig::default();
    if let Some(t) = args.total_steps {
        guidance.total_steps = t;
    }
    if let Some(m) = args.aggregation_steps {
        guidance.aggregation_steps = m;
    }
    if let Some(n) = args.intervention_steps {
        guidance.intervention_steps = n;
    }
    if let Some(a) = args.alpha {
        guidance.alpha = a;
    }
    if let Some(k) = args.iou_threshold {
        guidance.iou_threshold = k;
    }
    if let Some(mode) = args.mode {
        guidance.mode = mode;
    }
    guidance
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    fs::create_dir_all(&args.out_dir)?;
    let jobs = args.jobs.max(1).min(layouts.len());

    let results: Vec<(String, Result<RunManifest, CliError>)> = if jobs <= 1 {
        layouts
            .iter()
            .map(|layout| {
                let dir = args.out_dir.join(&layout.id);
                (
                    layout.id.clone(),
                    execute_run(layout, &engine, &weights, &guidance, args.seed, args.dump_maps, &dir),
                )
            })
            .collect()
    } else {
        // One worker per job; each owns whole runs, outputs land in
        // per-layout directories so workers never share files.
        let next = Mutex::new(0usize);
        let results: Mutex<Vec<Option<(String, Result<RunManifest, CliError>)>>> =
            Mutex::new((0..layouts.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let idx = {
                        let mut guard = next.lock().expect("scheduler lock");
                        let idx = *guard;
                        *guard += 1;
                        idx
                    };
                    if idx >= layouts.len() {
                        break;
                    }
                    let layout = &layouts[idx];
                    let dir = args.out_dir.join(&layout.id);
                    let result = execute_run(
                        layout,
                        &engine,
                        &weights,
                        &guidance,
                        args.seed,
                        args.dump_maps,
                        &dir,
                    );
                    results.lock().expect("results lock")[idx] = Some((layout.id.clone(), result));
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every layout processed"))
            .collect()
    };

    let mut first_error = None;
    for (id, result) in results {
        match result {
            Ok(manifest) => println!(
                "layout {id}: {:?} mode, {} artifacts -> {}",
                manifest.resolved_mode,
                manifest.outputs.len(),
                args.out_dir.join(&id).display()
            ),
            Err(e) => {
                eprintln!("layout {id}: {e}");
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    match first_error {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

/// Aggregated concept maps of a latent, off-tape.
fn concept_maps_of(
    layout: &Layout,
    engine_cfg: &EngineConfig,
    seed: u64,
    latent: &Latent,
) -> Result<Vec<Grid2D>, CliError> {
    let engine = AttentionEngine::new(engine_cfg.clone(), seed)
        .map_err(|e| CliError::Format(e.to_string()))?;
    let embedding = engine
        .encode_prompt(&layout.prompt)
        .map_err(|e| CliError::Format(e.to_string()))?;
    let mut tape = Tape::new();
    let channels = latent.to_grids();
    let stack = engine
        .attention_stack(&mut tape, &channels, &embedding)
        .map_err(|e| CliError::Format(e.to_string()))?;
    engine
        .aggregate_concept_maps(&mut tape, &stack, &layout.concepts, layout.prompt.len())
        .map_err(|e| CliError::Format(e.to_string()))
}

/// Run one layout and write trace, final maps/renders, optional per-step
/// dumps, and the manifest. Returns the manifest.
pub fn execute_run(
    layout: &Layout,
    engine: &EngineConfig,
    weights: &LossWeights,
    guidance: &GuidanceConfig,
    seed: u64,
    dump_maps: bool,
    run_dir: &Path,
) -> Result<RunManifest, CliError> {
    let options = RunOptions {
        record_maps: dump_maps,
    };
    let output = run_schedule(layout, engine, weights, guidance, seed, &options)?;

    fs::create_dir_all(run_dir)?;
    let mut rel_paths: Vec<String> = Vec::new();

    write_jsonl(&run_dir.join("trace.jsonl"), &output.trace)?;
    rel_paths.push("trace.jsonl".into());

    let final_maps = concept_maps_of(layout, engine, seed, &output.final_latent)?;
    fs::create_dir_all(run_dir.join("final"))?;
    for (i, map) in final_maps.iter().enumerate() {
        let tolog_rel = format!("final/concept_{i}.tolog");
        let pgm_rel = format!("final/concept_{i}.pgm");
        tolog::write_grid(&run_dir.join(&tolog_rel), map)?;
        pgm::write_grid(&run_dir.join(&pgm_rel), map)?;
        rel_paths.push(tolog_rel);
        rel_paths.push(pgm_rel);
    }

    if dump_maps {
        for step in &output.map_dumps {
            let step_dir = run_dir.join(format!("maps/step_{}", step.timestep));
            fs::create_dir_all(&step_dir)?;
            for (i, map) in step.maps.iter().enumerate() {
                let rel = format!("maps/step_{}/concept_{i}.tolog", step.timestep);
                tolog::write_grid(&run_dir.join(format!("maps/step_{}/concept_{i}.tolog", step.timestep)), map)?;
                rel_paths.push(rel);
            }
            let _ = step_dir;
        }
    }

    rel_paths.sort();
    let mut outputs = Vec::with_capacity(rel_paths.len());
    for rel in rel_paths {
        let sha256 = sha256_file(&run_dir.join(&rel))?;
        outputs.push(Artifact { path: rel, sha256 });
    }

    let manifest = RunManifest {
        seed,
        layout: layout.clone(),
        engine: engine.clone(),
        weights: *weights,
        guidance: *guidance,
        resolved_mode: output.resolved_mode,
        dump_maps,
        outputs,
    };
    write_manifest(&run_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Re-execute a manifest and verify every artifact checksum matches.
fn replay(args: &GuideArgs, manifest_path: &Path) -> Result<(), CliError> {
    let recorded = crate::manifest::read_manifest(manifest_path)?;
    let run_dir = args.out_dir.join(&recorded.layout.id);
    fs::create_dir_all(&args.out_dir)?;
    let reproduced = execute_run(
        &recorded.layout,
        &recorded.engine,
        &recorded.weights,
        &recorded.guidance,
        recorded.seed,
        recorded.dump_maps,
        &run_dir,
    )?;

    let mut mismatches = Vec::new();
    if recorded.outputs.len() != reproduced.outputs.len() {
        mismatches.push(format!(
            "artifact count: recorded {} vs reproduced {}",
            recorded.outputs.len(),
            reproduced.outputs.len()
        ));
    }
    for (old, new) in recorded.outputs.iter().zip(&reproduced.outputs) {
        if old.path != new.path || old.sha256 != new.sha256 {
            mismatches.push(format!("{} vs {}", old.path, new.path));
        }
    }
    if mismatches.is_empty() {
        println!(
            "replay verified: {} artifacts match {}",
            recorded.outputs.len(),
            manifest_path.display()
        );
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "replay diverged from {}: {}",
            manifest_path.display(),
            mismatches.join(", ")
        )))
    }
}
