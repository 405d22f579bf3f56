use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous image coordinates with a confidence score
/// and category id. Area is `(x2 − x1)·(y2 − y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub score: f32,
    pub category: u32,
}

pub type BoxSet = Vec<BBox>;

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, score: f32, category: u32) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            score,
            category,
        };
        b.validate()?;
        Ok(b)
    }

    /// Unscored box, for candidates and annotations.
    pub fn region(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        Self::new(x1, y1, x2, y2, 0.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2, self.score]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::InvalidInput(format!("degenerate box {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidInput(format!(
                "box score {} outside [0,1]",
                self.score
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 as f64 - self.x1 as f64
    }

    pub fn height(&self) -> f64 {
        self.y2 as f64 - self.y1 as f64
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Same box with every coordinate multiplied by `s`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x1: (self.x1 as f64 * sx) as f32,
            y1: (self.y1 as f64 * sy) as f32,
            x2: (self.x2 as f64 * sx) as f32,
            y2: (self.y2 as f64 * sy) as f32,
            ..*self
        }
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices sorted by score descending, lower index first on ties.
fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression run independently inside each category.
///
/// A box survives iff its IoU with every already-kept box of the same
/// category is at most `iou_threshold`. Returned indices are ordered by score
/// descending.
pub fn nms_per_category(boxes: &[BBox], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        let b = &boxes[i];
        let clear = kept
            .iter()
            .filter(|&&k| boxes[k].category == b.category)
            .all(|&k| iou(&boxes[k], b) <= iou_threshold);
        if clear {
            kept.push(i);
        }
    }
    kept
}

/// Indices of the `min(k, n)` highest-scoring boxes, score descending.
pub fn top_k_indices(boxes: &[BBox], k: usize) -> Vec<usize> {
    let mut order = score_order(boxes);
    order.truncate(k);
    order
}

/// The `min(k, n)` highest-scoring boxes, score descending with input order
/// preserved among equal scores.
pub fn select_top_k(boxes: &[BBox], k: usize) -> BoxSet {
    top_k_indices(boxes, k).into_iter().map(|i| boxes[i]).collect()
}
