//! Guidance losses over aggregated concept maps.
//!
//! Two families: the region/boundary aggregation losses that pull each
//! concept's attention into its box, and the separation loss that penalizes
//! overlap between different concepts' foreground regions.
//!
//! Detachment policy: min/max, the dynamic threshold, the hard foreground
//! mask, the MBR, and the IoU prefactor are constants for gradient purposes.
//! Gradients flow only through the normalized map, the sigmoid-sharpened
//! map, the straight-through box, and the Sobel edge map. The detached
//! quantities are computed once per step in [`analyze_concept`] and then
//! frozen into the differentiable graph by [`build_concept`]; a
//! finite-difference oracle re-uses the same frozen analysis.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid2D, GridError, Tape};
use crate::layout::BoundingBox;
use crate::CANVAS_SIZE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("box mask covers {} of the frame: threshold undefined", if *all_ones { "all" } else { "none" })]
    DegenerateBox { all_ones: bool },
    #[error("{concepts} concepts but {boxes} box masks")]
    MismatchedConcepts { concepts: usize, boxes: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Loss hyperparameters. The mixing weight, sigmoid sharpness, and the two
/// region-loss weights have no published values; these defaults are the
/// artifact's own and every one is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Threshold mixing weight between inside-box and outside-box means.
    pub lambda: f64,
    /// Sigmoid sharpness applied to the normalized map.
    pub sharpness: f64,
    /// Weight of the sharpened-map region term.
    pub lambda_s: f64,
    /// Weight of the straight-through-box region term.
    pub lambda_a: f64,
    /// Denominator guard.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.6,
            sharpness: 10.0,
            lambda_s: 1.0,
            lambda_a: 1.0,
            eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.lambda)
            && self.sharpness > 0.0
            && self.lambda_s >= 0.0
            && self.lambda_a >= 0.0
            && self.eps > 0.0
    }
}

/// Rasterize a pixel-space box onto a square cell grid: a cell is inside
/// iff its center lies in the (closed) box.
pub fn rasterize_box(b: &BoundingBox, grid_size: usize) -> Grid2D {
    let cell = CANVAS_SIZE / grid_size as f64;
    let mut data = alloc::vec![0.0; grid_size * grid_size];
    for r in 0..grid_size {
        let y = (r as f64 + 0.5) * cell;
        for c in 0..grid_size {
            let x = (c as f64 + 0.5) * cell;
            if b.contains(x, y) {
                data[r * grid_size + c] = 1.0;
            }
        }
    }
    Grid2D::from_vec(grid_size, grid_size, data).expect("binary data is finite")
}

/// Min-max normalization with detached extrema; a constant map normalizes
/// to all zeros (with zero gradient).
pub fn normalize_map_with(tape: &mut Tape, map: &Grid2D, min: f64, max: f64) -> Grid2D {
    let shifted = tape.offset(map, -min);
    let span = max - min;
    let inv = if span > 0.0 { 1.0 / span } else { 0.0 };
    tape.scale(&shifted, inv)
}

/// Min-max normalization, extrema taken from the map itself.
pub fn normalize_map(tape: &mut Tape, map: &Grid2D) -> Grid2D {
    normalize_map_with(tape, map, map.min_value(), map.max_value())
}

/// Mixture of the normalized map's mean inside and outside the box. Detached.
pub fn dynamic_threshold(
    m_norm: &Grid2D,
    box_mask: &Grid2D,
    lambda: f64,
) -> Result<f64, LossError> {
    if m_norm.shape() != box_mask.shape() {
        return Err(GridError::DimensionMismatch {
            op: "dynamic_threshold",
            lhs: m_norm.shape(),
            rhs: box_mask.shape(),
        }
        .into());
    }
    let inside = box_mask.sum_value();
    let total = (box_mask.height() * box_mask.width()) as f64;
    let outside = total - inside;
    if inside == 0.0 {
        return Err(LossError::DegenerateBox { all_ones: false });
    }
    if outside == 0.0 {
        return Err(LossError::DegenerateBox { all_ones: true });
    }
    let mut inside_sum = 0.0;
    let mut outside_sum = 0.0;
    for (v, b) in m_norm.data().iter().zip(box_mask.data()) {
        if *b != 0.0 {
            inside_sum += v;
        } else {
            outside_sum += v;
        }
    }
    Ok(lambda * inside_sum / inside + (1.0 - lambda) * outside_sum / outside)
}

/// Hard foreground mask: 1 where the normalized map reaches `tau`. Detached.
pub fn foreground_mask(m_norm: &Grid2D, tau: f64) -> Grid2D {
    let data: Vec<f64> = m_norm
        .data()
        .iter()
        .map(|&v| if v >= tau { 1.0 } else { 0.0 })
        .collect();
    Grid2D::from_vec(m_norm.height(), m_norm.width(), data).expect("binary data is finite")
}

/// Minimum bounding rectangle of a binary mask; an empty mask yields an
/// all-zero rectangle.
pub fn mbr(mask: &Grid2D) -> Grid2D {
    let (h, w) = mask.shape();
    let mut r0 = usize::MAX;
    let mut r1 = 0usize;
    let mut c0 = usize::MAX;
    let mut c1 = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Grid2D::zeros(h, w);
    }
    let mut data = alloc::vec![0.0; h * w];
    for r in r0..=r1 {
        for c in c0..=c1 {
            data[r * w + c] = 1.0;
        }
    }
    Grid2D::from_vec(h, w, data).expect("binary data is finite")
}

/// Hard rectangle forward, soft map backward.
pub fn straight_through_box(
    tape: &mut Tape,
    mbr: &Grid2D,
    m_norm: &Grid2D,
) -> Result<Grid2D, GridError> {
    tape.straight_through(mbr, m_norm)
}

/// Overlap of the predicted rectangle with the target box:
/// intersection over (rectangle plus the box cells outside it). Detached;
/// an empty union yields 0.
pub fn soft_iou(mbr: &Grid2D, box_mask: &Grid2D) -> Result<f64, LossError> {
    if mbr.shape() != box_mask.shape() {
        return Err(GridError::DimensionMismatch {
            op: "soft_iou",
            lhs: mbr.shape(),
            rhs: box_mask.shape(),
        }
        .into());
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (m, b) in mbr.data().iter().zip(box_mask.data()) {
        inter += m * b;
        union += m + (1.0 - m) * b;
    }
    if union <= 0.0 {
        Ok(0.0)
    } else {
        Ok(inter / union)
    }
}

/// Everything detached about one concept at the current step.
#[derive(Debug, Clone)]
pub struct ConceptAnalysis {
    pub min: f64,
    pub max: f64,
    pub tau: f64,
    pub mask: Grid2D,
    pub mbr: Grid2D,
    pub iou: f64,
    /// `mbr - norm` at the analyzed point: the frozen residual inside the
    /// straight-through construction. A finite-difference oracle adds it to
    /// the live normalized map to difference the same function the tape
    /// differentiates.
    pub st_residual: Grid2D,
}

/// Compute the detached quantities for one concept map against its box.
///
/// Runs the same normalization kernel as the differentiable path (on
/// constants), so the threshold comparison sees bit-identical values.
pub fn analyze_concept(
    map: &Grid2D,
    box_mask: &Grid2D,
    weights: &LossWeights,
) -> Result<ConceptAnalysis, LossError> {
    let mut scratch = Tape::new();
    let values = Grid2D::from_vec(map.height(), map.width(), map.data().to_vec())?;
    let min = values.min_value();
    let max = values.max_value();
    let m_norm = normalize_map_with(&mut scratch, &values, min, max);
    let tau = dynamic_threshold(&m_norm, box_mask, weights.lambda)?;
    let mask = foreground_mask(&m_norm, tau);
    let rect = mbr(&mask);
    let iou = soft_iou(&rect, box_mask)?;
    let residual: Vec<f64> = rect
        .data()
        .iter()
        .zip(m_norm.data())
        .map(|(r, n)| r - n)
        .collect();
    let st_residual = Grid2D::from_vec(rect.height(), rect.width(), residual)?;
    Ok(ConceptAnalysis {
        min,
        max,
        tau,
        mask,
        mbr: rect,
        iou,
        st_residual,
    })
}

/// One concept's tape-bound fields, built around a frozen analysis.
#[derive(Debug, Clone)]
pub struct ConceptMaps {
    /// Raw aggregated map.
    pub map: Grid2D,
    /// Normalized map (detached extrema).
    pub norm: Grid2D,
    pub tau: f64,
    /// Hard foreground mask (constant).
    pub mask: Grid2D,
    /// `mask * norm`; gradient flows through the norm factor only.
    pub masked_norm: Grid2D,
    /// Minimum bounding rectangle of the mask (constant).
    pub mbr: Grid2D,
    /// Straight-through rectangle: forward equals `mbr`, gradient follows `norm`.
    pub mbr_st: Grid2D,
    /// Sigmoid-sharpened map.
    pub sharp: Grid2D,
    pub soft_iou: f64,
    /// Sobel edge magnitude of the raw map.
    pub edges: Grid2D,
}

/// How the straight-through rectangle is realized.
enum StraightThroughMode {
    /// Exact hard forward, soft gradient (the production path).
    Exact,
    /// Frozen residual plus the live normalized map: the literal function
    /// whose derivative the exact path reports. Finite-difference oracles
    /// difference this one.
    Surrogate,
}

fn build_concept_inner(
    tape: &mut Tape,
    map: Grid2D,
    analysis: &ConceptAnalysis,
    weights: &LossWeights,
    st_mode: StraightThroughMode,
) -> Result<ConceptMaps, LossError> {
    let norm = normalize_map_with(tape, &map, analysis.min, analysis.max);
    let masked_norm = tape.hadamard(&analysis.mask, &norm)?;
    let mbr_st = match st_mode {
        StraightThroughMode::Exact => straight_through_box(tape, &analysis.mbr, &norm)?,
        StraightThroughMode::Surrogate => tape.add(&analysis.st_residual, &norm)?,
    };
    let centered = tape.offset(&norm, -analysis.tau);
    let scaled = tape.scale(&centered, weights.sharpness);
    let sharp = tape.sigmoid(&scaled);
    let edges = tape.sobel(&map)?;
    Ok(ConceptMaps {
        map,
        norm,
        tau: analysis.tau,
        mask: analysis.mask.clone(),
        masked_norm,
        mbr: analysis.mbr.clone(),
        mbr_st,
        sharp,
        soft_iou: analysis.iou,
        edges,
    })
}

/// Assemble the differentiable per-concept fields with the analysis frozen.
pub fn build_concept(
    tape: &mut Tape,
    map: Grid2D,
    analysis: &ConceptAnalysis,
    weights: &LossWeights,
) -> Result<ConceptMaps, LossError> {
    build_concept_inner(tape, map, analysis, weights, StraightThroughMode::Exact)
}

/// Oracle variant: the straight-through rectangle is replaced by its frozen
/// residual plus the live normalized map, so forward differencing sees the
/// function the exact path differentiates. Forward values agree with
/// [`build_concept`] only up to rounding at the analyzed point.
pub fn build_concept_fd_surrogate(
    tape: &mut Tape,
    map: Grid2D,
    analysis: &ConceptAnalysis,
    weights: &LossWeights,
) -> Result<ConceptMaps, LossError> {
    build_concept_inner(tape, map, analysis, weights, StraightThroughMode::Surrogate)
}

/// Analyze and build in one go (the non-oracle path).
pub fn concept_from_map(
    tape: &mut Tape,
    map: Grid2D,
    box_mask: &Grid2D,
    weights: &LossWeights,
) -> Result<(ConceptMaps, ConceptAnalysis), LossError> {
    let analysis = analyze_concept(&map, box_mask, weights)?;
    let concept = build_concept(tape, map, &analysis, weights)?;
    Ok((concept, analysis))
}

/// Mean over ordered pairs of the overlap between one concept's foreground
/// and another's foreground attention; zero for a single concept.
pub fn separation_loss(
    tape: &mut Tape,
    concepts: &[ConceptMaps],
    weights: &LossWeights,
) -> Result<Grid2D, LossError> {
    let k = concepts.len();
    if k <= 1 {
        return Ok(Grid2D::scalar(0.0));
    }
    let denominators: Vec<Grid2D> = concepts
        .iter()
        .map(|c| {
            let s = tape.sum(&c.masked_norm);
            tape.offset(&s, weights.eps)
        })
        .collect();
    let mut acc: Option<Grid2D> = None;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let overlap = tape.hadamard(&concepts[i].mask, &concepts[j].masked_norm)?;
            let num = tape.sum(&overlap);
            let term = tape.div_scalar(&num, &denominators[j])?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(&prev, &term)?,
            });
        }
    }
    let pairs = (k * (k - 1)) as f64;
    Ok(tape.scale(&acc.expect("k > 1"), 1.0 / pairs))
}

/// Detached value of one ordered pair's overlap term, for traces and reports.
pub fn pair_overlap_value(mask_i: &Grid2D, masked_norm_j: &Grid2D, eps: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, v) in mask_i.data().iter().zip(masked_norm_j.data()) {
        num += m * v;
    }
    for v in masked_norm_j.data() {
        den += v;
    }
    num / (den + eps)
}

/// `(1 - x)` as a tape node.
fn one_minus(tape: &mut Tape, x: &Grid2D) -> Grid2D {
    let neg = tape.scale(x, -1.0);
    tape.offset(&neg, 1.0)
}

/// Region-aware loss: how much sharpened mass and straight-through rectangle
/// fall outside the box, gated by how far the rectangle already is from it.
pub fn region_loss(
    tape: &mut Tape,
    concept: &ConceptMaps,
    box_mask: &Grid2D,
    weights: &LossWeights,
) -> Result<Grid2D, LossError> {
    let prefactor = 1.0 - concept.soft_iou;

    let sharp_total = concept.sharp.sum_value();
    let term_s = if sharp_total > 0.0 && weights.lambda_s > 0.0 {
        let inside = tape.hadamard(&concept.sharp, box_mask)?;
        let num = tape.sum(&inside);
        let den_raw = tape.sum(&concept.sharp);
        let den = tape.offset(&den_raw, weights.eps);
        let ratio = tape.div_scalar(&num, &den)?;
        let miss = one_minus(tape, &ratio);
        tape.scale(&miss, weights.lambda_s)
    } else {
        Grid2D::scalar(0.0)
    };

    // Branch on the hard rectangle so exact and surrogate builds agree.
    let st_total = concept.mbr.sum_value();
    let term_a = if st_total > 0.0 && weights.lambda_a > 0.0 {
        let inside = tape.hadamard(&concept.mbr_st, box_mask)?;
        let num = tape.sum(&inside);
        let den_raw = tape.sum(&concept.mbr_st);
        let den = tape.offset(&den_raw, weights.eps);
        let ratio = tape.div_scalar(&num, &den)?;
        let miss = one_minus(tape, &ratio);
        tape.scale(&miss, weights.lambda_a)
    } else {
        Grid2D::scalar(0.0)
    };

    let bracket = tape.add(&term_s, &term_a)?;
    Ok(tape.scale(&bracket, prefactor))
}

/// Boundary-aware loss: edge mass falling outside the box, gated like the
/// region term. A flat map (no edges) contributes zero.
pub fn boundary_loss(
    tape: &mut Tape,
    concept: &ConceptMaps,
    box_mask: &Grid2D,
) -> Result<Grid2D, LossError> {
    let edge_total = concept.edges.sum_value();
    if edge_total <= 0.0 {
        return Ok(Grid2D::scalar(0.0));
    }
    let inside = tape.hadamard(&concept.edges, box_mask)?;
    let num = tape.sum(&inside);
    let den = tape.sum(&concept.edges);
    let ratio = tape.div_scalar(&num, &den)?;
    let miss = one_minus(tape, &ratio);
    Ok(tape.scale(&miss, 1.0 - concept.soft_iou))
}

/// Sum of region and boundary losses over all concepts.
pub fn aggregation_loss(
    tape: &mut Tape,
    concepts: &[ConceptMaps],
    box_masks: &[Grid2D],
    weights: &LossWeights,
) -> Result<Grid2D, LossError> {
    if concepts.len() != box_masks.len() {
        return Err(LossError::MismatchedConcepts {
            concepts: concepts.len(),
            boxes: box_masks.len(),
        });
    }
    let mut acc: Option<Grid2D> = None;
    for (concept, box_mask) in concepts.iter().zip(box_masks) {
        let region = region_loss(tape, concept, box_mask, weights)?;
        let boundary = boundary_loss(tape, concept, box_mask)?;
        let per_concept = tape.add(&region, &boundary)?;
        acc = Some(match acc {
            None => per_concept,
            Some(prev) => tape.add(&prev, &per_concept)?,
        });
    }
    Ok(acc.unwrap_or_else(|| Grid2D::scalar(0.0)))
}
