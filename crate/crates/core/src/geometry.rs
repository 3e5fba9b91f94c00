//! Axis-aligned box arithmetic in continuous pixel coordinates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite and non-negative: [{0}, {1}, {2}, {3}]")]
    OutOfDomain(f64, f64, f64, f64),
    #[error("box corners are inverted: [{0}, {1}, {2}, {3}]")]
    Inverted(f64, f64, f64, f64),
    #[error("score {0} is outside [0, 1]")]
    Score(f64),
}

/// Box given by its top-left `(x1, y1)` and bottom-right `(x2, y2)` corners.
///
/// The origin is the top-left of the image with y growing downward. Area is
/// continuous, `(x2 - x1) * (y2 - y1)`, not an inclusive pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(GeometryError::OutOfDomain(x1, y1, x2, y2));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        PixelBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        b.to_array()
    }
}

/// A detector output: a box, its confidence, and the noun chunk it was
/// produced for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: PixelBox,
    pub score: f64,
    pub chunk_index: usize,
}

impl ScoredBox {
    pub fn new(bbox: PixelBox, score: f64, chunk_index: usize) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::Score(score));
        }
        Ok(Self {
            bbox,
            score,
            chunk_index,
        })
    }
}

/// Intersection over union. A zero-area union yields 0.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression over all candidates jointly.
///
/// `chunk_index` is ignored, so a box can suppress boxes found for other
/// noun chunks. Candidates are visited by descending score (ties: lower
/// input index first) and kept iff their IoU with every kept box is below
/// `overlap_threshold`. Returns kept indices in ascending input order.
pub fn nms(candidates: &[ScoredBox], overlap_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| candidates[j].score.total_cmp(&candidates[i].score).then(i.cmp(&j)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let candidate = &candidates[i].bbox;
        if kept
            .iter()
            .all(|&k| iou(&candidates[k].bbox, candidate) < overlap_threshold)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}
