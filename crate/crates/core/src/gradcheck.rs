//! Finite-difference validation of the guidance-loss gradients.
//!
//! For a random toy instance, the tape gradient of each loss w.r.t. every
//! latent cell is compared against central differences of the forward loss.
//! The detached quantities (extrema, threshold, mask, rectangle, IoU) are
//! computed once at the base point and frozen into both the analytic graph
//! and the finite-difference evaluations, so both sides differentiate the
//! same function.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::attention::{AttentionEngine, EngineConfig, Latent};
use crate::grid::{Grid2D, Tape};
use crate::layout::{BoundingBox, Layout};
use crate::losses::{
    aggregation_loss, analyze_concept, build_concept, build_concept_fd_surrogate, rasterize_box,
    separation_loss, ConceptAnalysis, LossWeights,
};
use crate::rng::SplitMix64;
use crate::schedule::RunError;
use crate::MAP_SIZE;

/// Max absolute deviation normalized by the larger gradient's infinity norm.
pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), fd.len());
    let mut max_diff = 0.0f64;
    let mut scale = 1e-12f64;
    for (a, f) in analytic.iter().zip(fd) {
        max_diff = max_diff.max((a - f).abs());
        scale = scale.max(a.abs()).max(f.abs());
    }
    max_diff / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCheck {
    pub seed: u64,
    pub rel_aggregation: f64,
    pub rel_separation: f64,
}

impl SeedCheck {
    pub fn max_rel(&self) -> f64 {
        self.rel_aggregation.max(self.rel_separation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<SeedCheck>,
    pub max_rel: f64,
}

/// Two deliberately overlapping boxes, sized to rasterize well clear of the
/// degenerate all-ones / all-zeros masks.
fn random_layout(seed: u64) -> Layout {
    let mut rng = SplitMix64::stream(seed, "gradcheck-layout");
    let mut draw_box = || {
        let w = 120.0 + 130.0 * rng.next_f64();
        let h = 120.0 + 130.0 * rng.next_f64();
        let x0 = 30.0 + (450.0 - w - 30.0) * rng.next_f64();
        let y0 = 30.0 + (450.0 - h - 30.0) * rng.next_f64();
        BoundingBox::new(x0, y0, x0 + w, y0 + h)
    };
    let first = draw_box();
    let second = {
        let b = draw_box();
        // Drag the second box toward the first so the pair overlaps.
        let (fx, fy) = first.center();
        let (bx, by) = b.center();
        let dx = (fx - bx) * 0.6;
        let dy = (fy - by) * 0.6;
        BoundingBox::new(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)
    };
    Layout {
        id: alloc::format!("gradcheck-{seed}"),
        prompt: ["a", "red", "apple", "and", "yellow", "clock"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        boxes: alloc::vec![first, second],
        concepts: alloc::vec![alloc::vec![1, 2], alloc::vec![4, 5]],
        category: None,
    }
}

struct Instance {
    engine: AttentionEngine,
    layout: Layout,
    box_masks: Vec<Grid2D>,
    latent: Latent,
}

fn build_instance(engine_cfg: &EngineConfig, seed: u64) -> Result<Instance, RunError> {
    let engine = AttentionEngine::new(engine_cfg.clone(), seed)?;
    let layout = random_layout(seed);
    let box_masks = layout
        .boxes
        .iter()
        .map(|b| rasterize_box(b, MAP_SIZE))
        .collect();
    let latent = engine.initial_latent();
    Ok(Instance {
        engine,
        layout,
        box_masks,
        latent,
    })
}

/// Both loss values at `latent`, with the analyses frozen.
fn forward_losses(
    inst: &Instance,
    latent: &Latent,
    analyses: &[ConceptAnalysis],
    weights: &LossWeights,
) -> Result<(f64, f64), RunError> {
    let embedding = inst.engine.encode_prompt(&inst.layout.prompt)?;
    let mut tape = Tape::new();
    let channels = latent.to_grids();
    let stack = inst.engine.attention_stack(&mut tape, &channels, &embedding)?;
    let maps = inst.engine.aggregate_concept_maps(
        &mut tape,
        &stack,
        &inst.layout.concepts,
        inst.layout.prompt.len(),
    )?;
    let mut concepts = Vec::with_capacity(maps.len());
    for (idx, (map, analysis)) in maps.into_iter().zip(analyses).enumerate() {
        concepts.push(
            build_concept_fd_surrogate(&mut tape, map, analysis, weights)
                .map_err(|source| RunError::Loss { concept: idx, source })?,
        );
    }
    let agg = aggregation_loss(&mut tape, &concepts, &inst.box_masks, weights)
        .map_err(|source| RunError::Loss { concept: 0, source })?;
    let sep = separation_loss(&mut tape, &concepts, weights)
        .map_err(|source| RunError::Loss { concept: 0, source })?;
    Ok((
        agg.scalar_value().expect("scalar loss"),
        sep.scalar_value().expect("scalar loss"),
    ))
}

/// Check one random instance; returns the per-loss relative errors.
/// `probe_cells = 0` differences every latent coordinate.
pub fn check_seed(
    engine_cfg: &EngineConfig,
    weights: &LossWeights,
    seed: u64,
    step: f64,
    probe_cells: usize,
) -> Result<SeedCheck, RunError> {
    let inst = build_instance(engine_cfg, seed)?;
    let embedding = inst.engine.encode_prompt(&inst.layout.prompt)?;

    // Freeze the detached quantities at the base point.
    let analyses: Vec<ConceptAnalysis> = {
        let mut tape = Tape::new();
        let channels = inst.latent.to_grids();
        let stack = inst.engine.attention_stack(&mut tape, &channels, &embedding)?;
        let maps = inst.engine.aggregate_concept_maps(
            &mut tape,
            &stack,
            &inst.layout.concepts,
            inst.layout.prompt.len(),
        )?;
        maps.iter()
            .zip(&inst.box_masks)
            .enumerate()
            .map(|(idx, (map, box_mask))| {
                analyze_concept(map, box_mask, weights)
                    .map_err(|source| RunError::Loss { concept: idx, source })
            })
            .collect::<Result<_, _>>()?
    };

    // Analytic gradients on a fresh tape with the same frozen analyses.
    let (grad_agg, grad_sep) = {
        let mut tape = Tape::new();
        let channels = inst.latent.attach(&mut tape);
        let stack = inst.engine.attention_stack(&mut tape, &channels, &embedding)?;
        let maps = inst.engine.aggregate_concept_maps(
            &mut tape,
            &stack,
            &inst.layout.concepts,
            inst.layout.prompt.len(),
        )?;
        let mut concepts = Vec::with_capacity(maps.len());
        for (idx, (map, analysis)) in maps.into_iter().zip(&analyses).enumerate() {
            concepts.push(
                build_concept(&mut tape, map, analysis, weights)
                    .map_err(|source| RunError::Loss { concept: idx, source })?,
            );
        }
        let agg = aggregation_loss(&mut tape, &concepts, &inst.box_masks, weights)
            .map_err(|source| RunError::Loss { concept: 0, source })?;
        let sep = separation_loss(&mut tape, &concepts, weights)
            .map_err(|source| RunError::Loss { concept: 0, source })?;

        let flatten = |tape: &Tape, root: &Grid2D| -> Result<Vec<f64>, RunError> {
            let cells = inst.latent.height() * inst.latent.width();
            let mut flat = alloc::vec![0.0; cells * inst.latent.num_channels()];
            if root.node().is_some() {
                let grads = tape.backward(root)?;
                for (c, ch) in channels.iter().enumerate() {
                    if let Some(g) = grads.wrt(ch) {
                        flat[c * cells..(c + 1) * cells].copy_from_slice(g.data());
                    }
                }
            }
            Ok(flat)
        };
        (flatten(&tape, &agg)?, flatten(&tape, &sep)?)
    };

    // Central differences over a coordinate set: every cell when
    // `probe_cells` is 0, otherwise the largest-gradient cells of each loss
    // plus a seeded random sample. Probing always includes the gradient
    // peaks so the normalization scale is exact.
    let cells = inst.latent.height() * inst.latent.width();
    let num_channels = inst.latent.num_channels();
    let total = cells * num_channels;
    let coords: Vec<usize> = if probe_cells == 0 || probe_cells >= total {
        (0..total).collect()
    } else {
        let top_k = |g: &[f64]| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..total).collect();
            idx.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).expect("finite"));
            idx.truncate(8);
            idx
        };
        let mut picked = alloc::vec![false; total];
        let mut coords = Vec::with_capacity(probe_cells + 16);
        for i in top_k(&grad_agg).into_iter().chain(top_k(&grad_sep)) {
            if !picked[i] {
                picked[i] = true;
                coords.push(i);
            }
        }
        let mut rng = SplitMix64::stream(seed, "gradcheck-probe");
        while coords.len() < probe_cells {
            let i = (rng.next_u64() % total as u64) as usize;
            if !picked[i] {
                picked[i] = true;
                coords.push(i);
            }
        }
        coords
    };

    let mut a_probe = Vec::with_capacity(coords.len());
    let mut s_probe = Vec::with_capacity(coords.len());
    let mut fd_agg = Vec::with_capacity(coords.len());
    let mut fd_sep = Vec::with_capacity(coords.len());
    for &coord in &coords {
        let (c, i) = (coord / cells, coord % cells);
        let mut channels: Vec<Vec<f64>> = (0..num_channels)
            .map(|cc| inst.latent.channel(cc).to_vec())
            .collect();
        channels[c][i] += step;
        let plus = Latent::new(inst.latent.height(), inst.latent.width(), channels.clone())
            .expect("finite");
        channels[c][i] -= 2.0 * step;
        let minus =
            Latent::new(inst.latent.height(), inst.latent.width(), channels).expect("finite");
        let (ap, sp) = forward_losses(&inst, &plus, &analyses, weights)?;
        let (am, sm) = forward_losses(&inst, &minus, &analyses, weights)?;
        a_probe.push(grad_agg[coord]);
        s_probe.push(grad_sep[coord]);
        fd_agg.push((ap - am) / (2.0 * step));
        fd_sep.push((sp - sm) / (2.0 * step));
    }

    Ok(SeedCheck {
        seed,
        rel_aggregation: relative_error(&a_probe, &fd_agg),
        rel_separation: relative_error(&s_probe, &fd_sep),
    })
}

/// Check `count` consecutive seeds starting at `base_seed`.
pub fn check_seeds(
    engine_cfg: &EngineConfig,
    weights: &LossWeights,
    base_seed: u64,
    count: u64,
    step: f64,
    probe_cells: usize,
) -> Result<GradCheckReport, RunError> {
    let mut checks = Vec::with_capacity(count as usize);
    let mut max_rel = 0.0f64;
    for seed in base_seed..base_seed + count {
        let check = check_seed(engine_cfg, weights, seed, step, probe_cells)?;
        max_rel = max_rel.max(check.max_rel());
        checks.push(check);
    }
    Ok(GradCheckReport { checks, max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_layouts_overlap_and_stay_in_frame() {
        for seed in 0..50 {
            let layout = random_layout(seed);
            assert!(layout.validate().is_ok());
            for b in &layout.boxes {
                assert!(b.x_min >= 0.0 && b.x_max <= 512.0);
                assert!(b.y_min >= 0.0 && b.y_max <= 512.0);
                assert!(b.is_well_formed());
            }
            assert!(layout.layout_iou() > 0.0, "seed {seed} boxes disjoint");
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_few_seeds() {
        let engine_cfg = EngineConfig::default();
        let weights = LossWeights::default();
        let report = check_seeds(&engine_cfg, &weights, 0, 2, 1e-3, 0).unwrap();
        assert!(
            report.max_rel <= 1e-3,
            "max relative error {}",
            report.max_rel
        );
    }
}
