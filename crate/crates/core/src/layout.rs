//! Layout records, the dirty-data filter, and max-IoU dataset partitioning.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::CANVAS_SIZE;

/// Axis-aligned box in pixel coordinates on the 512x512 canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Point-in-box test, inclusive on all edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn is_well_formed(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }
}

/// Intersection-over-union on continuous coordinates.
pub fn pairwise_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Spatial,
    Color,
    Size,
}

/// Prompt, bounding boxes, and per-box concepts (token-index subsets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub id: String,
    pub prompt: Vec<String>,
    pub boxes: Vec<BoundingBox>,
    pub concepts: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

/// The three dirty-data conditions; a layout violating any of them is
/// rejected rather than errored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectRule {
    /// Some coordinate exceeds the 512-pixel canvas.
    CoordinateOutOfRange,
    /// `x_min >= x_max`.
    XOrderViolated,
    /// `y_min >= y_max`.
    YOrderViolated,
}

impl core::fmt::Display for RejectRule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RejectRule::CoordinateOutOfRange => write!(f, "coordinate exceeds canvas"),
            RejectRule::XOrderViolated => write!(f, "x_min >= x_max"),
            RejectRule::YOrderViolated => write!(f, "y_min >= y_max"),
        }
    }
}

/// Structural problems are errors, not rule rejections.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("layout {id}: {reason}")]
    Malformed { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Accepted,
    Rejected(RejectRule),
}

impl Layout {
    pub fn num_concepts(&self) -> usize {
        self.boxes.len()
    }

    fn check_structure(&self) -> Result<(), LayoutError> {
        let malformed = |reason: String| LayoutError::Malformed {
            id: self.id.clone(),
            reason,
        };
        if self.prompt.is_empty() {
            return Err(malformed("empty prompt".into()));
        }
        if self.boxes.is_empty() {
            return Err(malformed("no boxes".into()));
        }
        if self.boxes.len() != self.concepts.len() {
            return Err(malformed(alloc::format!(
                "{} boxes but {} concepts",
                self.boxes.len(),
                self.concepts.len()
            )));
        }
        for (i, tokens) in self.concepts.iter().enumerate() {
            if tokens.is_empty() {
                return Err(malformed(alloc::format!("concept {i} has no tokens")));
            }
            for &t in tokens {
                if t >= self.prompt.len() {
                    return Err(malformed(alloc::format!(
                        "concept {i} token index {t} out of range for prompt of {}",
                        self.prompt.len()
                    )));
                }
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let coords = [b.x_min, b.y_min, b.x_max, b.y_max];
            if coords.iter().any(|v| !v.is_finite()) {
                return Err(malformed(alloc::format!("box {i} has non-finite coordinates")));
            }
        }
        Ok(())
    }

    /// Apply the dirty-data rules after structural checks.
    pub fn validate(&self) -> Result<Validation, LayoutError> {
        self.check_structure()?;
        for b in &self.boxes {
            let max_coord = b.x_min.max(b.y_min).max(b.x_max).max(b.y_max);
            if max_coord > CANVAS_SIZE {
                return Ok(Validation::Rejected(RejectRule::CoordinateOutOfRange));
            }
            if b.x_min >= b.x_max {
                return Ok(Validation::Rejected(RejectRule::XOrderViolated));
            }
            if b.y_min >= b.y_max {
                return Ok(Validation::Rejected(RejectRule::YOrderViolated));
            }
        }
        Ok(Validation::Accepted)
    }

    /// Representative overlap: maximum IoU over distinct box pairs; zero for
    /// single-box layouts.
    pub fn layout_iou(&self) -> f64 {
        let mut max = 0.0;
        for i in 0..self.boxes.len() {
            for j in i + 1..self.boxes.len() {
                max = f64::max(max, pairwise_iou(&self.boxes[i], &self.boxes[j]));
            }
        }
        max
    }
}

/// Bucket boundaries: `iou <= low`, `low < iou <= high`, `iou > high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionThresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for PartitionThresholds {
    fn default() -> Self {
        PartitionThresholds { low: 0.0, high: 0.1 }
    }
}

impl PartitionThresholds {
    pub fn is_valid(&self) -> bool {
        self.low >= 0.0 && self.low < self.high
    }

    pub fn bucket_for(&self, iou: f64) -> Bucket {
        if iou <= self.low {
            Bucket::Zero
        } else if iou <= self.high {
            Bucket::Low
        } else {
            Bucket::High
        }
    }
}

/// Overlap regime of a layout. With default thresholds: `iou = 0`,
/// `0 < iou <= 0.1`, `iou > 0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Zero,
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Position in the input sequence.
    pub index: usize,
    pub id: String,
    pub iou: f64,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Position in the input sequence.
    pub index: usize,
    pub id: String,
    pub rule: RejectRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub thresholds: PartitionThresholds,
    pub counts: [usize; 3],
    pub assignments: Vec<Assignment>,
    pub rejected: Vec<Rejection>,
}

impl PartitionReport {
    pub fn count(&self, bucket: Bucket) -> usize {
        self.counts[bucket as usize]
    }
}

/// Validate and bucket every layout. Rule violations are recorded, not
/// errors; structural problems abort.
pub fn partition(
    layouts: &[Layout],
    thresholds: PartitionThresholds,
) -> Result<PartitionReport, LayoutError> {
    debug_assert!(thresholds.is_valid());
    let mut report = PartitionReport {
        thresholds,
        counts: [0; 3],
        assignments: Vec::new(),
        rejected: Vec::new(),
    };
    for (index, layout) in layouts.iter().enumerate() {
        match layout.validate()? {
            Validation::Rejected(rule) => report.rejected.push(Rejection {
                index,
                id: layout.id.clone(),
                rule,
            }),
            Validation::Accepted => {
                let iou = layout.layout_iou();
                let bucket = thresholds.bucket_for(iou);
                report.counts[bucket as usize] += 1;
                report.assignments.push(Assignment {
                    index,
                    id: layout.id.clone(),
                    iou,
                    bucket,
                });
            }
        }
    }
    Ok(report)
}
