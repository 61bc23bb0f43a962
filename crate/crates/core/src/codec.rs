//! Conversions between normalized proposals, the scaled diffusion signal
//! space, and continuous query embeddings.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::interval::{canonicalize, TemporalProposal};
use crate::nn::{Linear, ParamStore};

pub const DEFAULT_SIGNAL_SCALE: f64 = 0.5;
pub const FREQUENCY_BASE: f64 = 10000.0;
/// Signal coordinates are multiplied by this before the sinusoidal features
/// so the highest frequency resolves sub-percent boundary shifts.
pub const COORDINATE_GAIN: f64 = 100.0;

/// A (start, end) pair in diffusion signal space, `[-scale, scale]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SignalProposal {
    pub start: f64,
    pub end: f64,
}

impl SignalProposal {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn clamped(self, scale: f64) -> Self {
        Self::new(self.start.clamp(-scale, scale), self.end.clamp(-scale, scale))
    }

    pub fn is_finite(&self) -> bool {
        self.start.is_finite() && self.end.is_finite()
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("signal scale must be positive, got {scale}")));
    }
    Ok(())
}

/// `x ↦ (2x − 1) · scale` per boundary.
pub fn scale_signal(p: &TemporalProposal, scale: f64) -> Result<SignalProposal> {
    check_scale(scale)?;
    Ok(SignalProposal::new((2.0 * p.start - 1.0) * scale, (2.0 * p.end - 1.0) * scale))
}

/// Inverse of [`scale_signal`], clamped to `[0, 1]` and reordered.
pub fn unscale_signal(sp: &SignalProposal, scale: f64) -> Result<TemporalProposal> {
    check_scale(scale)?;
    let back = |x: f64| ((x / scale + 1.0) / 2.0).clamp(0.0, 1.0);
    canonicalize(back(sp.start), back(sp.end))
}

/// Interleaved sin/cos features of one scalar at geometrically spaced
/// frequencies `gain / base^(2m / dim)`.
pub fn sinusoidal_scalar(x: f64, dim: usize, gain: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    for (k, o) in out.iter_mut().enumerate() {
        let m = (k / 2) as f64;
        let freq = gain / FREQUENCY_BASE.powf(2.0 * m / dim as f64);
        *o = if k % 2 == 0 { (x * freq).sin() } else { (x * freq).cos() };
    }
}

/// Sinusoidal embedding of a signal pair: `dim / 2` features per coordinate,
/// start features first.
pub fn sinusoidal_embed(sp: &SignalProposal, dim: usize) -> Result<Vec<f64>> {
    if dim < 4 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim must be even and >= 4, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    sinusoidal_scalar(sp.start * COORDINATE_GAIN, half, 1.0, &mut out[..half]);
    sinusoidal_scalar(sp.end * COORDINATE_GAIN, half, 1.0, &mut out[half..]);
    Ok(out)
}

pub fn sinusoidal_matrix(sps: &[SignalProposal], dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((sps.len(), dim));
    for (i, sp) in sps.iter().enumerate() {
        let row = sinusoidal_embed(sp, dim)?;
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(m)
}

/// Query embeddings together with the proposals they encode.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub embeddings: Array2<f64>,
    pub sources: Vec<SignalProposal>,
    pub timestep: i64,
}

/// The learnable projection `g`: sinusoidal features → affine → SiLU → affine.
#[derive(Debug, Clone)]
pub struct QueryProjection {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub first: Linear,
    pub second: Linear,
}

impl QueryProjection {
    pub fn new(store: &mut ParamStore, name: &str, embed_dim: usize, model_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embed_dim,
            model_dim,
            first: Linear::new(store, &format!("{name}.first"), embed_dim, model_dim, true, rng),
            second: Linear::new(store, &format!("{name}.second"), model_dim, model_dim, true, rng),
        }
    }

    /// Records the projection on `tape`. Inputs are clamped to the signal
    /// range before embedding.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, sps: &[SignalProposal], scale: f64) -> Result<Var> {
        let clamped: Vec<_> = sps.iter().map(|s| s.clamped(scale)).collect();
        let feats = sinusoidal_matrix(&clamped, self.embed_dim)?;
        let x = tape.constant(feats);
        let h = self.first.forward(tape, store, x);
        let h = tape.silu(h);
        Ok(self.second.forward(tape, store, h))
    }
}

pub fn project_queries(
    sps: &[SignalProposal],
    proj: &QueryProjection,
    store: &ParamStore,
    scale: f64,
    timestep: i64,
) -> Result<QuerySet> {
    let w = store.value(proj.first.weight);
    if w.nrows() != proj.embed_dim || store.value(proj.second.weight).ncols() != proj.model_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{}→{}", proj.embed_dim, proj.model_dim),
            actual: format!("{}×{}", w.nrows(), w.ncols()),
        });
    }
    let mut tape = Tape::new();
    let out = proj.forward(&mut tape, store, sps, scale)?;
    Ok(QuerySet {
        embeddings: tape.value(out).clone(),
        sources: sps.to_vec(),
        timestep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn scaling_fixtures() {
        let sp = scale_signal(&TemporalProposal::new(0.2, 0.6), 0.5).unwrap();
        assert!((sp.start + 0.3).abs() < 1e-15 && (sp.end - 0.1).abs() < 1e-15);
        for scale in [0.1, 0.5, 2.0] {
            assert_eq!(scale_signal(&TemporalProposal::new(0.5, 0.5), scale).unwrap(), SignalProposal::new(0.0, 0.0));
        }
        assert_eq!(unscale_signal(&SignalProposal::new(-0.5, 0.5), 0.5).unwrap(), TemporalProposal::new(0.0, 1.0));
        assert_eq!(unscale_signal(&SignalProposal::new(0.6, -0.6), 0.5).unwrap(), TemporalProposal::new(0.0, 1.0));
        assert!(scale_signal(&TemporalProposal::new(0.1, 0.2), 0.0).is_err());
        assert!(unscale_signal(&SignalProposal::new(0.1, 0.2), -1.0).is_err());
        assert_eq!(DEFAULT_SIGNAL_SCALE, 0.5);
    }

    #[test]
    fn embedding_fixtures() {
        let e = sinusoidal_embed(&SignalProposal::new(0.0, 0.0), 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_embed(&SignalProposal::new(0.0, 0.0), 7).is_err());
        assert!(sinusoidal_embed(&SignalProposal::new(0.0, 0.0), 2).is_err());
        let a = sinusoidal_embed(&SignalProposal::new(0.1, -0.2), 16).unwrap();
        assert_eq!(a, sinusoidal_embed(&SignalProposal::new(0.1, -0.2), 16).unwrap());
    }

    #[test]
    fn distinct_proposals_have_distinct_embeddings() {
        let grid: Vec<f64> = (0..11).map(|i| -0.5 + 0.1 * i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let a = SignalProposal::new(grid[rng.random_range(0..11)], grid[rng.random_range(0..11)]);
            let b = SignalProposal::new(grid[rng.random_range(0..11)], grid[rng.random_range(0..11)]);
            if (a.start - b.start).abs() < 0.099 && (a.end - b.end).abs() < 0.099 {
                continue;
            }
            let ea = sinusoidal_embed(&a, 64).unwrap();
            let eb = sinusoidal_embed(&b, 64).unwrap();
            let d: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn projection_shapes_and_identity_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::default();
        let proj = QueryProjection::new(&mut store, "proj", 16, 8, &mut rng);
        let sps: Vec<_> = (0..30)
            .map(|i| SignalProposal::new(-0.5 + i as f64 / 30.0, 0.1))
            .collect();
        let qs = project_queries(&sps, &proj, &store, 0.5, 3).unwrap();
        assert_eq!(qs.embeddings.dim(), (30, 8));
        assert_eq!(qs.sources.len(), 30);
        assert_eq!(qs, project_queries(&sps, &proj, &store, 0.5, 3).unwrap());

        *store.value_mut(proj.second.weight) = Array2::eye(8);
        let qs = project_queries(&sps, &proj, &store, 0.5, 3).unwrap();
        let feats = sinusoidal_matrix(&sps, 16).unwrap();
        let pre = feats.dot(store.value(proj.first.weight)) + store.value(proj.first.bias.unwrap());
        let act = pre.mapv(|x| x * sigmoid(x));
        assert_eq!(qs.embeddings, act);

        let mut bad = ParamStore::default();
        let other = QueryProjection::new(&mut bad, "proj", 12, 8, &mut rng);
        let wrong = QueryProjection { embed_dim: 16, ..other };
        assert!(project_queries(&sps, &wrong, &bad, 0.5, 0).is_err());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::default();
        let proj = QueryProjection::new(&mut store, "proj", 8, 6, &mut rng);
        let sps: Vec<_> = (0..5).map(|_| SignalProposal::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect();
        let weights = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let loss = |store: &ParamStore| {
            let mut t = Tape::new();
            let o = proj.forward(&mut t, store, &sps, 0.5).unwrap();
            (t.value(o) * &weights).sum()
        };
        let mut t = Tape::new();
        let o = proj.forward(&mut t, &store, &sps, 0.5).unwrap();
        let grads = t.backward(&store, &[(o, weights.clone())]);
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.value(id).len() {
                let orig = store.value(id).as_slice().unwrap()[k];
                store.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
                let up = loss(&store);
                store.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
                let down = loss(&store);
                store.value_mut(id).as_slice_mut().unwrap()[k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.block(id).as_slice().unwrap()[k];
                assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn scale_round_trip(a in 0.001f64..0.999, b in 0.001f64..0.999, scale in 0.05f64..3.0) {
            let p = canonicalize(a, b).unwrap();
            let sp = scale_signal(&p, scale).unwrap();
            prop_assert!(sp.start.abs() <= scale + 1e-12 && sp.end.abs() <= scale + 1e-12);
            let back = unscale_signal(&sp, scale).unwrap();
            prop_assert!((back.start - p.start).abs() < 1e-12);
            prop_assert!((back.end - p.end).abs() < 1e-12);
        }

        #[test]
        fn embedding_entries_bounded(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            for x in sinusoidal_embed(&SignalProposal::new(a, b), 32).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&x));
            }
        }
    }
}
