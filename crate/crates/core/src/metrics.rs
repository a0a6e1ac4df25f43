//! Layout-correctness checks computed from supplied detections and pixels.
//!
//! The object detector itself is out of scope; these functions consume its
//! output contract. Grounding rules are deliberately simple and isolated
//! here: center-point comparison for spatial relations, strict area ordering
//! for size, and a circular hue mean against named intervals for color.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::BoundingBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("unknown color '{0}'")]
    UnknownColor(String),
    #[error("malformed color table: {0}")]
    BadColorTable(String),
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("image data length {got} does not match {width}x{height} RGB")]
    BadImage {
        width: usize,
        height: usize,
        got: usize,
    },
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Highest-score detection for a label; ties keep the earliest.
pub fn best_detection<'a>(detections: &'a [Detection], label: &str) -> Option<&'a Detection> {
    let mut best: Option<&Detection> = None;
    for d in detections.iter().filter(|d| d.label == label) {
        match best {
            Some(b) if d.score <= b.score => {}
            _ => best = Some(d),
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialRelation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

/// Pass/fail with an optional diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl CheckResult {
    fn pass() -> Self {
        CheckResult {
            pass: true,
            reason: None,
        }
    }

    fn fail(reason: String) -> Self {
        CheckResult {
            pass: false,
            reason: Some(reason),
        }
    }
}

/// Box centers of the best detections must satisfy the relation strictly;
/// y grows downward, so "above" means a smaller y center.
pub fn check_spatial(
    subject: &str,
    relation: SpatialRelation,
    object: &str,
    detections: &[Detection],
) -> CheckResult {
    let Some(s) = best_detection(detections, subject) else {
        return CheckResult::fail(alloc::format!("missing entity '{subject}'"));
    };
    let Some(o) = best_detection(detections, object) else {
        return CheckResult::fail(alloc::format!("missing entity '{object}'"));
    };
    let (sx, sy) = s.bbox.center();
    let (ox, oy) = o.bbox.center();
    let holds = match relation {
        SpatialRelation::LeftOf => sx < ox,
        SpatialRelation::RightOf => sx > ox,
        SpatialRelation::Above => sy < oy,
        SpatialRelation::Below => sy > oy,
    };
    if holds {
        CheckResult::pass()
    } else {
        CheckResult::fail(alloc::format!(
            "relation {relation:?} not satisfied: {subject} at ({sx:.1},{sy:.1}), {object} at ({ox:.1},{oy:.1})"
        ))
    }
}

/// Areas of the best detections must be strictly decreasing in the listed
/// order (largest first).
pub fn check_size(order: &[String], detections: &[Detection]) -> Result<CheckResult, MetricsError> {
    if order.len() < 2 {
        return Err(MetricsError::InvalidCase(
            "size ordering needs at least two labels".into(),
        ));
    }
    let mut areas = Vec::with_capacity(order.len());
    for label in order {
        match best_detection(detections, label) {
            Some(d) => areas.push(d.bbox.area()),
            None => {
                return Ok(CheckResult::fail(alloc::format!("missing entity '{label}'")));
            }
        }
    }
    for w in areas.windows(2) {
        if !(w[0] > w[1]) {
            return Ok(CheckResult::fail(alloc::format!(
                "area ordering violated: {} <= {}",
                w[0],
                w[1]
            )));
        }
    }
    Ok(CheckResult::pass())
}

// ── color ────────────────────────────────────────────────────────────

/// Hue interval in degrees; `start > end` wraps through 360.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct HueInterval {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for HueInterval {
    fn from(v: [f64; 2]) -> Self {
        HueInterval {
            start: v[0],
            end: v[1],
        }
    }
}

impl From<HueInterval> for [f64; 2] {
    fn from(i: HueInterval) -> Self {
        [i.start, i.end]
    }
}

impl HueInterval {
    /// Half-open containment `[start, end)`, wrapping when `start > end`.
    pub fn contains(&self, hue: f64) -> bool {
        if self.start <= self.end {
            hue >= self.start && hue < self.end
        } else {
            hue >= self.start || hue < self.end
        }
    }

    fn well_formed(&self) -> bool {
        (0.0..=360.0).contains(&self.start) && (0.0..=360.0).contains(&self.end)
    }
}

/// Named hue intervals; a color may own several (wrapping colors usually do).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColorTable {
    intervals: BTreeMap<String, Vec<HueInterval>>,
}

impl ColorTable {
    pub fn new(intervals: BTreeMap<String, Vec<HueInterval>>) -> Result<Self, MetricsError> {
        for (name, list) in &intervals {
            if list.is_empty() {
                return Err(MetricsError::BadColorTable(alloc::format!(
                    "color '{name}' has no intervals"
                )));
            }
            for i in list {
                if !i.well_formed() {
                    return Err(MetricsError::BadColorTable(alloc::format!(
                        "color '{name}' interval [{}, {}) out of range",
                        i.start,
                        i.end
                    )));
                }
            }
        }
        Ok(ColorTable { intervals })
    }

    /// Six 60-degree bands centered on canonical hues. Adjacent bands
    /// overlap where the canonical hues sit closer than 60 degrees; a query
    /// only ever tests one named color, so overlap is harmless.
    pub fn default_table() -> Self {
        let mut m = BTreeMap::new();
        let band = |center: f64| -> Vec<HueInterval> {
            let lo = center - 30.0;
            let hi = center + 30.0;
            if lo < 0.0 {
                alloc::vec![
                    HueInterval::from([lo + 360.0, 360.0]),
                    HueInterval::from([0.0, hi]),
                ]
            } else if hi > 360.0 {
                alloc::vec![
                    HueInterval::from([lo, 360.0]),
                    HueInterval::from([0.0, hi - 360.0]),
                ]
            } else {
                alloc::vec![HueInterval::from([lo, hi])]
            }
        };
        m.insert("red".to_string(), band(0.0));
        m.insert("orange".to_string(), band(30.0));
        m.insert("yellow".to_string(), band(60.0));
        m.insert("green".to_string(), band(120.0));
        m.insert("blue".to_string(), band(240.0));
        m.insert("purple".to_string(), band(300.0));
        ColorTable { intervals: m }
    }

    /// Re-check the invariants after deserializing.
    pub fn validate(&self) -> Result<(), MetricsError> {
        Self::new(self.intervals.clone()).map(|_| ())
    }

    pub fn matches(&self, color: &str, hue: f64) -> Result<bool, MetricsError> {
        let list = self
            .intervals
            .get(color)
            .ok_or_else(|| MetricsError::UnknownColor(color.to_string()))?;
        Ok(list.iter().any(|i| i.contains(hue)))
    }
}

impl Default for ColorTable {
    fn default() -> Self {
        Self::default_table()
    }
}

/// Interleaved RGB, 8 bits per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, MetricsError> {
        if pixels.len() != 3 * width * height {
            return Err(MetricsError::BadImage {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = 3 * (y * self.width + x);
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }
}

/// Standard RGB-to-hue in degrees [0, 360); achromatic pixels map to 0.
pub fn rgb_to_hue(r: u8, g: u8, b: u8) -> f64 {
    let r = r as f64 / 255.0;
    let g = g as f64 / 255.0;
    let b = b as f64 / 255.0;
    let v = r.max(g).max(b);
    let c = v - r.min(g).min(b);
    if c == 0.0 {
        return 0.0;
    }
    let h = if v == r {
        (g - b) / c
    } else if v == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    let deg = h * 60.0;
    if deg < 0.0 {
        deg + 360.0
    } else {
        deg
    }
}

/// Circular mean of hues in degrees, in [0, 360); `None` on empty input.
pub fn circular_mean_hue(hues: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sin = 0.0;
    let mut cos = 0.0;
    let mut count = 0usize;
    for h in hues {
        let rad = h * core::f64::consts::PI / 180.0;
        sin += libm::sin(rad);
        cos += libm::cos(rad);
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let mean = libm::atan2(sin, cos) * 180.0 / core::f64::consts::PI;
    // A tiny negative mean rounds to exactly 360.0 after the shift; fold it
    // back so the result stays in [0, 360).
    let mean = if mean < 0.0 { mean + 360.0 } else { mean };
    Some(if mean >= 360.0 { 0.0 } else { mean })
}

/// Mean hue of the pixels whose centers fall inside the box, clipped to the
/// image; `None` when no pixel qualifies.
pub fn box_mean_hue(image: &RgbImage, bbox: &BoundingBox) -> Option<f64> {
    let x0 = bbox.x_min.max(0.0).floor() as usize;
    let y0 = bbox.y_min.max(0.0).floor() as usize;
    let x1 = (bbox.x_max.ceil() as usize).min(image.width);
    let y1 = (bbox.y_max.ceil() as usize).min(image.height);
    let mut hues = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if bbox.contains(x as f64 + 0.5, y as f64 + 0.5) {
                let (r, g, b) = image.rgb(x, y);
                hues.push(rgb_to_hue(r, g, b));
            }
        }
    }
    circular_mean_hue(hues)
}

/// Every (label, expected color) pair must ground: the best detection's box
/// mean hue has to fall in the color's interval set.
pub fn check_color(
    expectations: &[(String, String)],
    detections: &[Detection],
    image: &RgbImage,
    table: &ColorTable,
) -> Result<CheckResult, MetricsError> {
    if expectations.is_empty() {
        return Err(MetricsError::InvalidCase("no color expectations".into()));
    }
    for (label, color) in expectations {
        let Some(det) = best_detection(detections, label) else {
            return Ok(CheckResult::fail(alloc::format!("missing entity '{label}'")));
        };
        let Some(hue) = box_mean_hue(image, &det.bbox) else {
            return Ok(CheckResult::fail(alloc::format!(
                "box for '{label}' is empty after clipping to the image"
            )));
        };
        if !table.matches(color, hue)? {
            return Ok(CheckResult::fail(alloc::format!(
                "'{label}' mean hue {hue:.1} not in '{color}'"
            )));
        }
    }
    Ok(CheckResult::pass())
}

// ── scoring ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<String>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub total: usize,
    pub passes: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub total: usize,
    pub passes: usize,
    /// Percentage, 100 * passes / total.
    pub accuracy: f64,
    pub per_bucket: BTreeMap<String, BucketScore>,
}

fn pct(passes: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * passes as f64 / total as f64
    }
}

/// Accuracy over all cases and per attached bucket label.
pub fn score_outcomes(outcomes: &[CaseOutcome]) -> ScoreReport {
    let total = outcomes.len();
    let passes = outcomes.iter().filter(|o| o.pass).count();
    let mut per_bucket: BTreeMap<String, BucketScore> = BTreeMap::new();
    for o in outcomes {
        if let Some(bucket) = &o.bucket {
            let entry = per_bucket.entry(bucket.clone()).or_insert(BucketScore {
                total: 0,
                passes: 0,
                accuracy: 0.0,
            });
            entry.total += 1;
            if o.pass {
                entry.passes += 1;
            }
        }
    }
    for score in per_bucket.values_mut() {
        score.accuracy = pct(score.passes, score.total);
    }
    ScoreReport {
        total,
        passes,
        accuracy: pct(passes, total),
        per_bucket,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn det(label: &str, bbox: [f64; 4], score: f64) -> Detection {
        Detection {
            label: label.to_string(),
            bbox: BoundingBox::from(bbox),
            score,
        }
    }

    #[test]
    fn spatial_examples() {
        // Centers (10, 50) and (100, 50).
        let dets = vec![
            det("A", [5.0, 45.0, 15.0, 55.0], 0.9),
            det("B", [95.0, 45.0, 105.0, 55.0], 0.8),
        ];
        assert!(check_spatial("A", SpatialRelation::LeftOf, "B", &dets).pass);
        assert!(!check_spatial("A", SpatialRelation::RightOf, "B", &dets).pass);

        let missing = check_spatial("A", SpatialRelation::LeftOf, "C", &dets);
        assert!(!missing.pass);
        assert!(missing.reason.unwrap().contains("missing entity"));

        // Equal centers on the relevant axis fail the strict comparison.
        let tied = vec![
            det("A", [0.0, 0.0, 10.0, 10.0], 0.9),
            det("B", [0.0, 20.0, 10.0, 30.0], 0.9),
        ];
        assert!(!check_spatial("A", SpatialRelation::LeftOf, "B", &tied).pass);
        assert!(check_spatial("A", SpatialRelation::Above, "B", &tied).pass);
    }

    #[test]
    fn spatial_duality_holds() {
        let mut rng = crate::rng::SplitMix64::new(8);
        for _ in 0..50 {
            let mut boxes = Vec::new();
            for _ in 0..2 {
                let x = 400.0 * rng.next_f64();
                let y = 400.0 * rng.next_f64();
                let w = 1.0 + 80.0 * rng.next_f64();
                let h = 1.0 + 80.0 * rng.next_f64();
                boxes.push([x, y, x + w, y + h]);
            }
            let dets = vec![det("A", boxes[0], 0.5), det("B", boxes[1], 0.5)];
            assert_eq!(
                check_spatial("A", SpatialRelation::LeftOf, "B", &dets).pass,
                check_spatial("B", SpatialRelation::RightOf, "A", &dets).pass
            );
            assert_eq!(
                check_spatial("A", SpatialRelation::Above, "B", &dets).pass,
                check_spatial("B", SpatialRelation::Below, "A", &dets).pass
            );
        }
    }

    #[test]
    fn best_detection_prefers_score_then_order() {
        let dets = vec![
            det("A", [0.0, 0.0, 1.0, 1.0], 0.5),
            det("A", [1.0, 1.0, 2.0, 2.0], 0.9),
            det("A", [2.0, 2.0, 3.0, 3.0], 0.9),
        ];
        let best = best_detection(&dets, "A").unwrap();
        assert_eq!(best.bbox.x_min, 1.0);
    }

    #[test]
    fn size_examples() {
        let order = vec!["A".to_string(), "B".to_string()];
        // Areas 10000 vs 2500.
        let dets = vec![
            det("A", [0.0, 0.0, 100.0, 100.0], 0.9),
            det("B", [0.0, 0.0, 50.0, 50.0], 0.9),
        ];
        assert!(check_size(&order, &dets).unwrap().pass);

        // Equal areas fail the strict ordering.
        let equal = vec![
            det("A", [0.0, 0.0, 50.0, 50.0], 0.9),
            det("B", [10.0, 10.0, 60.0, 60.0], 0.9),
        ];
        assert!(!check_size(&order, &equal).unwrap().pass);

        // Three-way ordering with one inversion fails.
        let three = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let dets3 = vec![
            det("A", [0.0, 0.0, 100.0, 100.0], 0.9),
            det("B", [0.0, 0.0, 20.0, 20.0], 0.9),
            det("C", [0.0, 0.0, 50.0, 50.0], 0.9),
        ];
        assert!(!check_size(&three, &dets3).unwrap().pass);

        // Uniform scaling preserves the verdict.
        let scaled: Vec<Detection> = dets3
            .iter()
            .map(|d| {
                det(
                    &d.label,
                    [
                        d.bbox.x_min * 3.0,
                        d.bbox.y_min * 3.0,
                        d.bbox.x_max * 3.0,
                        d.bbox.y_max * 3.0,
                    ],
                    d.score,
                )
            })
            .collect();
        assert_eq!(
            check_size(&three, &dets3).unwrap().pass,
            check_size(&three, &scaled).unwrap().pass
        );

        assert!(check_size(&["A".to_string()], &dets3).is_err());
    }

    #[test]
    fn hue_conversion_basics() {
        assert_eq!(rgb_to_hue(255, 0, 0), 0.0);
        assert_eq!(rgb_to_hue(0, 255, 0), 120.0);
        assert_eq!(rgb_to_hue(0, 0, 255), 240.0);
        assert_eq!(rgb_to_hue(128, 128, 128), 0.0);
    }

    fn solid_image(w: usize, h: usize, rgb: (u8, u8, u8)) -> RgbImage {
        let mut px = Vec::with_capacity(3 * w * h);
        for _ in 0..w * h {
            px.extend_from_slice(&[rgb.0, rgb.1, rgb.2]);
        }
        RgbImage::new(w, h, px).unwrap()
    }

    #[test]
    fn color_examples() {
        let table = ColorTable::default_table();
        let dets = vec![det("apple", [2.0, 2.0, 14.0, 14.0], 0.9)];
        let expect_red = vec![("apple".to_string(), "red".to_string())];

        let red = solid_image(16, 16, (255, 0, 0));
        assert!(check_color(&expect_red, &dets, &red, &table).unwrap().pass);

        let green = solid_image(16, 16, (0, 255, 0));
        assert!(!check_color(&expect_red, &dets, &green, &table).unwrap().pass);

        // Unknown color name is an input error.
        let expect_bad = vec![("apple".to_string(), "mauve".to_string())];
        assert!(check_color(&expect_bad, &dets, &red, &table).is_err());

        // Box entirely outside the image fails with a diagnostic.
        let outside = vec![det("apple", [100.0, 100.0, 120.0, 120.0], 0.9)];
        let res = check_color(&expect_red, &outside, &red, &table).unwrap();
        assert!(!res.pass);
        assert!(res.reason.unwrap().contains("empty"));
    }

    #[test]
    fn circular_mean_handles_wraparound() {
        // Half hue 350, half hue 10: circular mean 0; the arithmetic mean
        // (180) would be maximally wrong.
        let mean = circular_mean_hue([350.0, 10.0, 350.0, 10.0]).unwrap();
        assert!(mean < 1e-9 || (360.0 - mean) < 1e-9, "mean {mean}");
        assert!(ColorTable::default_table().matches("red", mean).unwrap());

        // Built from pixels: hue 350 = (255,0,42.5)-ish, hue 10 = (255,42.5,0).
        let mut px = Vec::new();
        for _ in 0..8 {
            px.extend_from_slice(&[255, 0, 43]);
        }
        for _ in 0..8 {
            px.extend_from_slice(&[255, 43, 0]);
        }
        let img = RgbImage::new(4, 4, px).unwrap();
        let hue = box_mean_hue(&img, &BoundingBox::new(0.0, 0.0, 4.0, 4.0)).unwrap();
        assert!(hue < 30.0 || hue > 330.0, "hue {hue}");
    }

    #[test]
    fn circular_mean_is_rotation_equivariant() {
        let base = vec![12.0, 75.0, 310.0, 200.0, 5.0];
        let m0 = circular_mean_hue(base.clone()).unwrap();
        for delta in [10.0, 90.0, 180.0, 271.5] {
            let shifted: Vec<f64> = base.iter().map(|h| (h + delta) % 360.0).collect();
            let m1 = circular_mean_hue(shifted).unwrap();
            let diff = (m1 - m0 - delta).rem_euclid(360.0);
            assert!(diff < 1e-9 || (360.0 - diff) < 1e-9, "delta {delta}: {diff}");
        }
    }

    #[test]
    fn score_examples() {
        let outcome = |id: &str, bucket: Option<&str>, pass: bool| CaseOutcome {
            id: id.to_string(),
            bucket: bucket.map(|b| b.to_string()),
            pass,
            reason: None,
        };

        let all = vec![outcome("1", None, true), outcome("2", None, true)];
        assert_eq!(score_outcomes(&all).accuracy, 100.0);

        let none: Vec<CaseOutcome> = (0..5).map(|i| outcome(&i.to_string(), None, false)).collect();
        assert_eq!(score_outcomes(&none).accuracy, 0.0);

        // Eight cases, five passes: 62.5.
        let mut eight = Vec::new();
        for i in 0..8 {
            eight.push(outcome(&i.to_string(), Some(if i < 4 { "zero" } else { "high" }), i < 5));
        }
        let report = score_outcomes(&eight);
        assert_eq!(report.accuracy, 62.5);
        assert_eq!(report.per_bucket["zero"].accuracy, 100.0);
        assert_eq!(report.per_bucket["high"].accuracy, 25.0);

        // Permutation invariance.
        let mut shuffled = eight.clone();
        shuffled.reverse();
        assert_eq!(score_outcomes(&shuffled).accuracy, report.accuracy);
    }
}
