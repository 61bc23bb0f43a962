//! 1-D interval arithmetic on normalized time.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A candidate action interval in normalized time, `0 <= start <= end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TemporalProposal {
    pub start: f64,
    pub end: f64,
}

impl TemporalProposal {
    /// Builds a proposal without checking. Callers must uphold the invariant;
    /// use [`canonicalize`] for raw model output.
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn iou(&self, other: &TemporalProposal) -> f64 {
        iou(self, other)
    }
}

/// Sorts the pair ascending and clamps it to `[0, 1]`.
pub fn canonicalize(a: f64, b: f64) -> Result<TemporalProposal> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidValue(format!("non-finite interval ({a}, {b})")));
    }
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Ok(TemporalProposal::new(lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0)))
}

/// Intersection over union. Zero-width intervals have IoU 0, even with
/// themselves.
pub fn iou(a: &TemporalProposal, b: &TemporalProposal) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    if union <= 0.0 || a.width() <= 0.0 || b.width() <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn pairwise_iou(xs: &[TemporalProposal], ys: &[TemporalProposal]) -> Array2<f64> {
    Array2::from_shape_fn((xs.len(), ys.len()), |(i, j)| iou(&xs[i], &ys[j]))
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first. A proposal is suppressed
/// when its IoU with an already kept one exceeds `iou_threshold`, so kept
/// pairs satisfy `iou <= iou_threshold`.
pub fn nms(proposals: &[TemporalProposal], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if proposals.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} scores", proposals.len()),
            actual: format!("{} scores", scores.len()),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidValue("non-finite score passed to nms".into()));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&proposals[i], &proposals[k]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    Ok(keep)
}
