//! Cross-timestep selective conditioning.
//!
//! Current-step queries are compared with the previous step's queries
//! (cosine similarity `A`) and with the previous step's denoised proposals
//! (IoU `B`). Pairs that overlap the previous estimate but are not already
//! similar are kept, every query keeps itself, and each query is refined by
//! attention over its selected partners.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::PairLists;
use crate::error::{Error, Result};
use crate::interval::{pairwise_iou, TemporalProposal};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_TRAINING_RATE: f64 = 0.7;

/// How the similarity set enters the final pair set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// `(P_iou \ P_sim) ∪ self`.
    #[default]
    Difference,
    /// `P_iou ∪ P_sim ∪ self`.
    Union,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    pub similar: BTreeSet<(usize, usize)>,
    pub overlapping: BTreeSet<(usize, usize)>,
    pub combined: BTreeSet<(usize, usize)>,
}

impl PairSelection {
    /// Per-row partner lists (sorted), the form consumed by refinement.
    pub fn partner_lists(&self, n: usize) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); n];
        for &(i, j) in &self.combined {
            lists[i].push(j);
        }
        lists
    }

    pub fn only_self_pairs(&self) -> bool {
        self.combined.iter().all(|&(i, j)| i == j)
    }
}

/// Previous-step references for the next selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningState {
    pub embeddings: Array2<f64>,
    pub proposals: Vec<TemporalProposal>,
}

impl ConditioningState {
    /// Selects pairs for `current` queries against these references.
    pub fn select(
        &self,
        embeddings: &Array2<f64>,
        proposals: &[TemporalProposal],
        gamma: f64,
        rule: SelectionRule,
    ) -> Result<PairSelection> {
        let a = similarity_matrix(embeddings, &self.embeddings)?;
        if proposals.len() != self.proposals.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} proposals", self.proposals.len()),
                actual: format!("{}", proposals.len()),
            });
        }
        let b = pairwise_iou(proposals, &self.proposals);
        select_pairs(&a, &b, gamma, rule)
    }
}

/// `A[i, j] = cos(current_i, previous_j)`; zero rows give similarity 0.
pub fn similarity_matrix(current: &Array2<f64>, previous: &Array2<f64>) -> Result<Array2<f64>> {
    if current.nrows() != previous.nrows() || current.ncols() != previous.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", previous.dim()),
            actual: format!("{:?}", current.dim()),
        });
    }
    let norms = |m: &Array2<f64>| -> Vec<f64> { m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
    let (nc, np) = (norms(current), norms(previous));
    let dots = current.dot(&previous.t());
    Ok(Array2::from_shape_fn(dots.raw_dim(), |(i, j)| {
        let denom = nc[i] * np[j];
        if denom == 0.0 {
            0.0
        } else {
            (dots[[i, j]] / denom).clamp(-1.0, 1.0)
        }
    }))
}

pub fn select_pairs(a: &Array2<f64>, b: &Array2<f64>, gamma: f64, rule: SelectionRule) -> Result<PairSelection> {
    if !(-1.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [-1, 1]")));
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    let above = |m: &Array2<f64>| -> BTreeSet<(usize, usize)> {
        m.indexed_iter()
            .filter(|(_, &v)| v - gamma > 0.0)
            .map(|(ij, _)| ij)
            .collect()
    };
    let similar = above(a);
    let overlapping = above(b);
    let mut combined: BTreeSet<(usize, usize)> = match rule {
        SelectionRule::Difference => overlapping.difference(&similar).copied().collect(),
        SelectionRule::Union => overlapping.union(&similar).copied().collect(),
    };
    combined.extend((0..a.nrows().min(a.ncols())).map(|i| (i, i)));
    Ok(PairSelection {
        similar,
        overlapping,
        combined,
    })
}

/// `q̂_i = softmax(q_i K_iᵀ / √D) V_i` with `K_i`, `V_i` gathered from the
/// partners of `i`.
pub fn refine_queries(
    queries: &Array2<f64>,
    partners: &[Vec<usize>],
    keys: &Array2<f64>,
    values: &Array2<f64>,
) -> Result<Array2<f64>> {
    if partners.len() != queries.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} partner lists", queries.nrows()),
            actual: format!("{}", partners.len()),
        });
    }
    let scale = 1.0 / (queries.ncols() as f64).sqrt();
    let mut out = Array2::zeros((queries.nrows(), values.ncols()));
    for (i, js) in partners.iter().enumerate() {
        if js.is_empty() {
            return Err(Error::InvalidArgument(format!("query {i} has no partners")));
        }
        let qi = queries.row(i);
        let logits: Vec<f64> = js.iter().map(|&j| qi.dot(&keys.row(j)) * scale).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut row = out.row_mut(i);
        for (&j, e) in js.iter().zip(&exps) {
            row.scaled_add(e / sum, &values.row(j));
        }
    }
    Ok(out)
}

pub fn to_pair_lists(selection: &PairSelection, n: usize) -> PairLists {
    Arc::new(selection.partner_lists(n))
}

/// Independent `Bernoulli(rate)` draw per proposal.
pub fn apply_training_rate<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("conditioning rate {rate} outside [0, 1]")));
    }
    Ok((0..n).map(|_| rng.random_bool(rate)).collect())
}

/// Inference conditions every proposal.
pub fn inference_mask(n: usize) -> Vec<bool> {
    vec![true; n]
}

/// Restricts rows with `mask[i] == false` to their self pair.
pub fn mask_selection(selection: &PairSelection, mask: &[bool]) -> PairSelection {
    let combined = selection
        .combined
        .iter()
        .copied()
        .filter(|&(i, j)| i == j || mask.get(i).copied().unwrap_or(false))
        .collect();
    PairSelection {
        combined,
        ..selection.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn similarity_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = random(4, 6, &mut rng);
        for mut r in q.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        let a = similarity_matrix(&q, &q).unwrap();
        for i in 0..4 {
            assert!((a[[i, i]] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-15);
            }
        }
        let x = ndarray::array![[1.0, 0.0], [0.0, 0.0]];
        let y = ndarray::array![[0.0, 1.0], [1.0, 1.0]];
        let s = similarity_matrix(&x, &y).unwrap();
        assert_eq!(s[[0, 0]], 0.0);
        assert_eq!(s[[1, 1]], 0.0);
        assert!(similarity_matrix(&x, &random(3, 2, &mut rng)).is_err());

        let (c, p) = (random(5, 7, &mut rng), random(5, 7, &mut rng));
        let a = similarity_matrix(&c, &p).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..7 {
                    dot += c[[i, k]] * p[[j, k]];
                    na += c[[i, k]] * c[[i, k]];
                    nb += p[[j, k]] * p[[j, k]];
                }
                assert!((a[[i, j]] - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 4, &mut rng).mapv(|x: f64| x.clamp(-0.99, 1.0));
        let b = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.01..1.0));
        let sel = select_pairs(&a, &b, 1.0, SelectionRule::Difference).unwrap();
        assert!(sel.similar.is_empty() && sel.overlapping.is_empty());
        assert!(sel.only_self_pairs());
        assert_eq!(sel.combined.len(), 4);
        let sel = select_pairs(&a, &b, -1.0, SelectionRule::Difference).unwrap();
        assert_eq!(sel.overlapping.len(), 16);
        assert_eq!(sel.similar.len(), 16);
        assert!(select_pairs(&a, &b, 1.5, SelectionRule::Difference).is_err());
        assert!(select_pairs(&a, &random(3, 4, &mut rng), 0.0, SelectionRule::Difference).is_err());
    }

    #[test]
    fn mixed_fixture_matches_set_comprehension() {
        let a = ndarray::array![[1.0, 0.7, -0.2], [0.1, 0.9, 0.6], [0.55, 0.3, 0.2]];
        let b = ndarray::array![[0.8, 0.6, 0.0], [0.0, 1.0, 0.7], [0.1, 0.9, 0.45]];
        let gamma = 0.5;
        let mut sim = BTreeSet::new();
        let mut iou = BTreeSet::new();
        for i in 0..3 {
            for j in 0..3 {
                if a[[i, j]] > gamma {
                    sim.insert((i, j));
                }
                if b[[i, j]] > gamma {
                    iou.insert((i, j));
                }
            }
        }
        let mut expect: BTreeSet<_> = iou.iter().filter(|p| !sim.contains(p)).copied().collect();
        expect.insert((0, 0));
        expect.insert((1, 1));
        expect.insert((2, 2));
        let sel = select_pairs(&a, &b, gamma, SelectionRule::Difference).unwrap();
        assert_eq!(sel.similar, sim);
        assert_eq!(sel.overlapping, iou);
        assert_eq!(sel.combined, expect);
        // (2,1): IoU 0.9, similarity 0.3 → selected
        assert!(sel.combined.contains(&(2, 1)));
        assert!(!sel.combined.contains(&(0, 1)));
        let union = select_pairs(&a, &b, gamma, SelectionRule::Union).unwrap();
        assert!(union.combined.contains(&(0, 1)) && union.combined.contains(&(2, 0)));
    }

    #[test]
    fn self_only_refinement_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(6, 8, &mut rng);
        let lists: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        assert_eq!(refine_queries(&q, &lists, &q, &q).unwrap(), q);
        let mut tape = Tape::new();
        let v = tape.constant(q.clone());
        let r = tape.refine(v, Arc::new(lists));
        assert_eq!(tape.value(r), &q);
    }

    #[test]
    fn two_pair_refinement_matches_hand_computation() {
        let q = ndarray::array![[1.0, 0.0], [0.5, 2.0]];
        let lists = vec![vec![0, 1], vec![1]];
        let out = refine_queries(&q, &lists, &q, &q).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let (l0, l1) = (1.0 * s, 0.5 * s);
        let w0 = l0.exp() / (l0.exp() + l1.exp());
        let w1 = 1.0 - w0;
        assert!((out[[0, 0]] - (w0 * 1.0 + w1 * 0.5)).abs() < 1e-12);
        assert!((out[[0, 1]] - (w1 * 2.0)).abs() < 1e-12);
        assert_eq!(out.row(1), q.row(1));
        assert_eq!(out.nrows(), 2);
        // the differentiable form agrees
        let mut tape = Tape::new();
        let v = tape.constant(q.clone());
        let r = tape.refine(v, Arc::new(lists));
        assert!((tape.value(r) - &out).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn training_rate_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(apply_training_rate(50, 0.0, &mut rng).unwrap().iter().all(|&m| !m));
        assert!(apply_training_rate(50, 1.0, &mut rng).unwrap().iter().all(|&m| m));
        let draws = apply_training_rate(10_000, 0.7, &mut rng).unwrap();
        let mean = draws.iter().filter(|&&m| m).count() as f64 / 10_000.0;
        assert!((0.68..=0.72).contains(&mean), "{mean}");
        assert!(apply_training_rate(3, 1.1, &mut rng).is_err());
        assert!(inference_mask(5).iter().all(|&m| m));
    }

    #[test]
    fn masked_rows_keep_only_self() {
        let a = Array2::zeros((3, 3));
        let b = Array2::ones((3, 3));
        let sel = select_pairs(&a, &b, 0.5, SelectionRule::Difference).unwrap();
        let masked = mask_selection(&sel, &[true, false, true]);
        assert_eq!(masked.partner_lists(3), vec![vec![0, 1, 2], vec![1], vec![0, 1, 2]]);
    }

    proptest! {
        #[test]
        fn selection_always_contains_self_pairs(vals in proptest::collection::vec(-1.0f64..1.0, 32), gamma in -1.0f64..1.0) {
            let a = Array2::from_shape_vec((4, 4), vals[..16].to_vec()).unwrap();
            let b = Array2::from_shape_vec((4, 4), vals[16..].iter().map(|v| v.abs()).collect()).unwrap();
            let sel = select_pairs(&a, &b, gamma, SelectionRule::Difference).unwrap();
            for i in 0..4 {
                prop_assert!(sel.combined.contains(&(i, i)));
            }
            // transposed iteration order gives the same sets
            let at = a.t().to_owned();
            let bt = b.t().to_owned();
            let selt = select_pairs(&at, &bt, gamma, SelectionRule::Difference).unwrap();
            let flip = |s: &BTreeSet<(usize, usize)>| s.iter().map(|&(i, j)| (j, i)).collect::<BTreeSet<_>>();
            prop_assert_eq!(flip(&selt.similar), sel.similar);
            prop_assert_eq!(flip(&selt.overlapping), sel.overlapping);
        }
    }
}
