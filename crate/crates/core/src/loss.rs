//! Set-prediction loss and the matching cost that shares its weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assign::Assignment;
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::interval::TemporalProposal;
use crate::model::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub comp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            iou: 2.0,
            comp: 1.0,
        }
    }
}

/// A ground-truth instance in normalized time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub interval: TemporalProposal,
    pub class: usize,
}

/// Raw head outputs for one video, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `N × (C+1)`, background last.
    pub logits: Array2<f64>,
    /// `N × 3`: start, end (signal space), predicted-IoU logit.
    pub loc: Array2<f64>,
    /// `N × 1`.
    pub completeness: Array2<f64>,
}

impl HeadOutputs {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.nrows() == 0
    }

    /// Unclamped boundaries in normalized time.
    fn boundaries(&self, i: usize, scale: f64) -> (f64, f64) {
        let back = |x: f64| (x / scale + 1.0) / 2.0;
        (back(self.loc[[i, 0]]), back(self.loc[[i, 1]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub comp: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.cls += o.cls;
        self.l1 += o.l1;
        self.iou += o.iou;
        self.comp += o.comp;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.l1, self.iou, self.comp].iter().all(|x| x.is_finite())
    }
}

/// IoU of an unordered raw pair against a canonical target, with partial
/// derivatives with respect to the two raw components.
fn raw_iou(p0: f64, p1: f64, gt: &TemporalProposal) -> (f64, f64, f64) {
    let swapped = p0 > p1;
    let (a, b) = if swapped { (p1, p0) } else { (p0, p1) };
    let lo = a.max(gt.start);
    let hi = b.min(gt.end);
    let inter = (hi - lo).max(0.0);
    let union = (b - a) + gt.width() - inter;
    if union <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let iou = inter / union;
    let (di_da, di_db) = if inter > 0.0 {
        (if a > gt.start { -1.0 } else { 0.0 }, if b < gt.end { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let du_da = -1.0 - di_da;
    let du_db = 1.0 - di_db;
    let da = (di_da * union - inter * du_da) / (union * union);
    let db = (di_db * union - inter * du_db) / (union * union);
    if swapped {
        (iou, db, da)
    } else {
        (iou, da, db)
    }
}

/// `cost[g, i] = λ_cls (1 − p_i(y_g)) + λ_L1 ‖b_i − b_g‖₁ + λ_iou (1 − IoU)`.
pub fn cost_matrix(heads: &HeadOutputs, targets: &[Target], w: &LossWeights, scale: f64) -> Array2<f64> {
    let probs: Vec<Vec<f64>> = (0..heads.len()).map(|i| softmax(&heads.logits.row(i).to_vec())).collect();
    Array2::from_shape_fn((targets.len(), heads.len()), |(g, i)| {
        let t = &targets[g];
        let (s, e) = heads.boundaries(i, scale);
        let l1 = (s - t.interval.start).abs() + (e - t.interval.end).abs();
        let (iou, _, _) = raw_iou(s, e, &t.interval);
        w.cls * (1.0 - probs[i][t.class]) + w.l1 * l1 + w.iou * (1.0 - iou)
    })
}

/// Detached regression target of the completeness and predicted-IoU heads:
/// IoU with the assigned ground truth, 0 for background predictions.
pub fn quality_targets(heads: &HeadOutputs, assignment: &Assignment, targets: &[Target], scale: f64) -> Vec<f64> {
    (0..heads.len())
        .map(|i| match assignment.owner.get(i).copied().flatten() {
            Some(g) if g < targets.len() => {
                let (s, e) = heads.boundaries(i, scale);
                raw_iou(s, e, &targets[g].interval).0.clamp(0.0, 1.0)
            }
            _ => 0.0,
        })
        .collect()
}

/// Keeps the quality target of each ground truth's first claimed (lowest
/// cost) prediction and sets the others to 0.
pub fn one_to_one_quality(quality: &mut [f64], assignment: &Assignment) {
    let best: Vec<usize> = assignment.per_gt.iter().filter_map(|p| p.first().copied()).collect();
    for (i, q) in quality.iter_mut().enumerate() {
        if !best.contains(&i) {
            *q = 0.0;
        }
    }
}

/// Loss over one video's predictions and its gradient with respect to the
/// raw head outputs.
pub fn set_prediction_loss(
    heads: &HeadOutputs,
    assignment: &Assignment,
    targets: &[Target],
    w: &LossWeights,
    scale: f64,
) -> Result<(LossBreakdown, HeadOutputs)> {
    check_assignment(heads, assignment)?;
    let quality = quality_targets(heads, assignment, targets, scale);
    set_prediction_loss_with_quality(heads, assignment, targets, w, scale, &quality)
}

fn check_assignment(heads: &HeadOutputs, assignment: &Assignment) -> Result<()> {
    if assignment.owner.len() != heads.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} assignment entries", heads.len()),
            actual: format!("{}", assignment.owner.len()),
        });
    }
    Ok(())
}

/// As [`set_prediction_loss`] with the quality targets supplied, so that the
/// loss is a smooth function of the head outputs alone.
pub fn set_prediction_loss_with_quality(
    heads: &HeadOutputs,
    assignment: &Assignment,
    targets: &[Target],
    w: &LossWeights,
    scale: f64,
    quality: &[f64],
) -> Result<(LossBreakdown, HeadOutputs)> {
    check_assignment(heads, assignment)?;
    let n = heads.len();
    if quality.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} quality targets"),
            actual: format!("{}", quality.len()),
        });
    }
    let background = heads.logits.ncols() - 1;
    let mut grad = HeadOutputs {
        logits: Array2::zeros(heads.logits.raw_dim()),
        loc: Array2::zeros(heads.loc.raw_dim()),
        completeness: Array2::zeros(heads.completeness.raw_dim()),
    };
    let inv_n = 1.0 / n.max(1) as f64;
    let inv_a = 1.0 / assignment.num_assigned().max(1) as f64;
    let mut out = LossBreakdown::default();
    for i in 0..n {
        let owner = assignment.owner[i];
        if let Some(g) = owner {
            if g >= targets.len() || targets[g].class >= background {
                return Err(Error::InvalidArgument(format!("prediction {i} assigned to invalid target {g}")));
            }
        }
        let label = owner.map_or(background, |g| targets[g].class);
        let probs = softmax(&heads.logits.row(i).to_vec());
        out.cls += w.cls * inv_n * -probs[label].max(1e-300).ln();
        for (c, p) in probs.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.logits[[i, c]] = w.cls * inv_n * (p - onehot);
        }

        if let Some(g) = owner {
            let gt = &targets[g].interval;
            let (s, e) = heads.boundaries(i, scale);
            let ds = 1.0 / (2.0 * scale);
            out.l1 += w.l1 * inv_a * ((s - gt.start).abs() + (e - gt.end).abs());
            grad.loc[[i, 0]] += w.l1 * inv_a * (s - gt.start).signum() * ds;
            grad.loc[[i, 1]] += w.l1 * inv_a * (e - gt.end).signum() * ds;
            let (iou, d0, d1) = raw_iou(s, e, gt);
            out.iou += w.iou * inv_a * (1.0 - iou);
            grad.loc[[i, 0]] -= w.iou * inv_a * d0 * ds;
            grad.loc[[i, 1]] -= w.iou * inv_a * d1 * ds;
        }
        let tau = quality[i];
        // completeness and predicted-IoU regress the same detached target
        for (value, slot) in [(heads.completeness[[i, 0]], 0usize), (heads.loc[[i, 2]], 1)] {
            let p = sigmoid(value);
            out.comp += w.comp * inv_n * (p - tau).powi(2);
            let d = w.comp * inv_n * 2.0 * (p - tau) * p * (1.0 - p);
            if slot == 0 {
                grad.completeness[[i, 0]] = d;
            } else {
                grad.loc[[i, 2]] = d;
            }
        }
    }
    out.total = out.cls + out.l1 + out.iou + out.comp;
    if !out.is_finite() {
        return Err(Error::InvalidValue(format!("non-finite loss components {out:?}")));
    }
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::ot_assign;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_heads(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> HeadOutputs {
        HeadOutputs {
            logits: Array2::from_shape_fn((n, classes + 1), |_| rng.random_range(-2.0..2.0)),
            loc: Array2::from_shape_fn((n, 3), |_| rng.random_range(-0.5..0.5)),
            completeness: Array2::from_shape_fn((n, 1), |_| rng.random_range(-2.0..2.0)),
        }
    }

    fn targets() -> Vec<Target> {
        vec![
            Target { interval: TemporalProposal::new(0.1, 0.35), class: 0 },
            Target { interval: TemporalProposal::new(0.5, 0.8), class: 2 },
        ]
    }

    #[test]
    fn perfect_prediction_has_zero_box_terms() {
        let t = vec![Target { interval: TemporalProposal::new(0.2, 0.6), class: 1 }];
        let heads = HeadOutputs {
            logits: ndarray::array![[-50.0, 50.0, -50.0]],
            loc: ndarray::array![[-0.3, 0.1, 50.0]],
            completeness: ndarray::array![[50.0]],
        };
        let a = ot_assign(&cost_matrix(&heads, &t, &LossWeights::default(), 0.5), 1).unwrap();
        let (l, _) = set_prediction_loss(&heads, &a, &t, &LossWeights::default(), 0.5).unwrap();
        assert!(l.l1.abs() < 1e-12);
        assert!(l.iou.abs() < 1e-12);
        assert!(l.total < 1e-12);
    }

    #[test]
    fn one_target_two_predictions_hand_oracle() {
        // gt [0.2, 0.6] class 0, C = 1; prediction 0 assigned, prediction 1 background
        let t = vec![Target { interval: TemporalProposal::new(0.2, 0.6), class: 0 }];
        let scale = 0.5;
        // prediction 0 boundaries 0.3, 0.7 → signal -0.2, 0.2
        let heads = HeadOutputs {
            logits: ndarray::array![[1.0, 0.0], [0.0, 2.0]],
            loc: ndarray::array![[-0.2, 0.2, 0.0], [-0.5, -0.4, 0.0]],
            completeness: ndarray::array![[0.0], [0.0]],
        };
        let a = Assignment { per_gt: vec![vec![0]], owner: vec![Some(0), None] };
        let w = LossWeights::default();
        let (l, _) = set_prediction_loss(&heads, &a, &t, &w, scale).unwrap();
        let ce0 = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let ce1 = -(2f64.exp() / (1.0 + 2f64.exp())).ln();
        let cls = 2.0 * 0.5 * (ce0 + ce1);
        let l1 = 5.0 * (0.1 + 0.1);
        let iou: f64 = 0.3 / 0.5; // inter [0.3, 0.6], union [0.2, 0.7]
        let iou_term = 2.0 * (1.0 - iou);
        // sigmoid(0) = 0.5 for both heads of both predictions
        let comp = 1.0 * 0.5 * (2.0 * (0.5 - iou).powi(2) + 2.0 * 0.25);
        assert!((l.cls - cls).abs() < 1e-12);
        assert!((l.l1 - l1).abs() < 1e-12);
        assert!((l.iou - iou_term).abs() < 1e-12);
        assert!((l.comp - comp).abs() < 1e-12);
        assert!((l.total - (cls + l1 + iou_term + comp)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = targets();
        let w = LossWeights::default();
        for _ in 0..20 {
            let heads = random_heads(6, 3, &mut rng);
            let a = ot_assign(&cost_matrix(&heads, &t, &w, 0.5), 2).unwrap();
            let (_, grad) = set_prediction_loss(&heads, &a, &t, &w, 0.5).unwrap();
            let h = 1e-7;
            // the quality target is detached: hold it fixed while differencing
            let quality = quality_targets(&heads, &a, &t, 0.5);
            let f = |hd: &HeadOutputs| set_prediction_loss_with_quality(hd, &a, &t, &w, 0.5, &quality).unwrap().0.total;
            for which in 0..3 {
                let shape = match which {
                    0 => heads.logits.dim(),
                    1 => heads.loc.dim(),
                    _ => heads.completeness.dim(),
                };
                for idx in ndarray::indices(shape) {
                    let mut up = heads.clone();
                    let mut down = heads.clone();
                    let (gu, gd, ga) = match which {
                        0 => (&mut up.logits, &mut down.logits, &grad.logits),
                        1 => (&mut up.loc, &mut down.loc, &grad.loc),
                        _ => (&mut up.completeness, &mut down.completeness, &grad.completeness),
                    };
                    gu[idx] += h;
                    gd[idx] -= h;
                    let num = (f(&up) - f(&down)) / (2.0 * h);
                    let ana = ga[idx];
                    assert!((num - ana).abs() <= 1e-5 * num.abs().max(ana.abs()).max(1e-3), "{which} {idx:?}: {ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn cost_uses_loss_weights() {
        let t = vec![Target { interval: TemporalProposal::new(0.2, 0.6), class: 0 }];
        let heads = HeadOutputs {
            logits: ndarray::array![[0.0, 0.0]],
            loc: ndarray::array![[-0.2, 0.2, 0.0]],
            completeness: ndarray::array![[0.0]],
        };
        let c = cost_matrix(&heads, &t, &LossWeights::default(), 0.5);
        let expect = 2.0 * 0.5 + 5.0 * 0.2 + 2.0 * (1.0 - 0.6);
        assert!((c[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_mismatched_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = random_heads(3, 2, &mut rng);
        assert!(set_prediction_loss(&heads, &Assignment::background(2), &[], &LossWeights::default(), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_permutation_equivariant(seed in any::<u64>(), shift in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = targets();
            let w = LossWeights::default();
            let heads = random_heads(6, 3, &mut rng);
            let a = ot_assign(&cost_matrix(&heads, &t, &w, 0.5), 2).unwrap();
            let (l, _) = set_prediction_loss(&heads, &a, &t, &w, 0.5).unwrap();
            prop_assert!(l.total >= 0.0 && l.cls >= 0.0 && l.comp >= 0.0);
            // rotate predictions together with the assignment
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let take = |m: &Array2<f64>| Array2::from_shape_fn(m.raw_dim(), |(i, j)| m[[perm[i], j]]);
            let permuted = HeadOutputs { logits: take(&heads.logits), loc: take(&heads.loc), completeness: take(&heads.completeness) };
            let owner: Vec<_> = perm.iter().map(|&p| a.owner[p]).collect();
            let pa = Assignment { per_gt: a.per_gt.clone(), owner };
            let (lp, _) = set_prediction_loss(&permuted, &pa, &t, &w, 0.5).unwrap();
            prop_assert!((lp.total - l.total).abs() < 1e-10);
        }
    }
}
