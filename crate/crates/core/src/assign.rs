//! Top-k label assignment between ground truths and predictions.
//!
//! Each ground truth claims its `k` cheapest predictions. When two ground
//! truths claim the same prediction the cheaper claim wins and the loser
//! moves on to its next cheapest unclaimed prediction. Processing all
//! `(gt, prediction)` pairs in ascending `(cost, gt, prediction)` order
//! realises exactly this rule.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Prediction indices per ground truth, in the order they were claimed.
    pub per_gt: Vec<Vec<usize>>,
    /// Owning ground truth of each prediction; `None` means background.
    pub owner: Vec<Option<usize>>,
}

impl Assignment {
    pub fn background(num_predictions: usize) -> Self {
        Self {
            per_gt: Vec::new(),
            owner: vec![None; num_predictions],
        }
    }

    pub fn num_assigned(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }
}

pub fn ot_assign(cost: &Array2<f64>, k: usize) -> Result<Assignment> {
    let (m, n) = cost.dim();
    if k == 0 || k > n.max(1) {
        return Err(Error::InvalidArgument(format!("top-k {k} not in [1, {n}]")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidValue("non-finite assignment cost".into()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..m).flat_map(|g| (0..n).map(move |p| (g, p))).collect();
    pairs.sort_by(|&(g1, p1), &(g2, p2)| {
        cost[[g1, p1]]
            .partial_cmp(&cost[[g2, p2]])
            .unwrap_or(Ordering::Equal)
            .then(g1.cmp(&g2))
            .then(p1.cmp(&p2))
    });
    let mut per_gt = vec![Vec::with_capacity(k); m];
    let mut owner = vec![None; n];
    let mut remaining = n;
    for (g, p) in pairs {
        if remaining == 0 {
            break;
        }
        if owner[p].is_none() && per_gt[g].len() < k {
            owner[p] = Some(g);
            per_gt[g].push(p);
            remaining -= 1;
        }
    }
    Ok(Assignment { per_gt, owner })
}
