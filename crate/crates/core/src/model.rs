//! The video encoder, the query-conditioned decoder, and the three output
//! heads.
//!
//! Every forward function records onto a [`Tape`], so one code path serves
//! training (followed by [`Tape::backward`]) and inference (value only).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_len, sigmoid, Tape, Var};
use crate::codec::{sinusoidal_scalar, unscale_signal, QueryProjection, QuerySet, SignalProposal, COORDINATE_GAIN};
use crate::error::{Error, Result};
use crate::interval::TemporalProposal;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::rng;

const KERNEL: usize = 3;
/// Width of the boundary attention window as a fraction of proposal length,
/// and its floor in normalized time.
const BOUNDARY_SPREAD: f64 = 0.25;
const BOUNDARY_FLOOR: f64 = 0.01;

/// Constant per-head additive cross-attention logits (`N × rows of F_g`).
pub type HeadBias = Vec<Option<Array2<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-snippet input width seen by each encoder.
    pub feat_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub scales: usize,
    pub ffn_mult: usize,
    pub num_classes: usize,
    /// One encoder per stream (e.g. `["rgb", "flow"]` under late fusion).
    pub streams: Vec<String>,
    /// Predict boundaries as an offset from the clamped input proposal
    /// rather than absolutely.
    pub residual_loc: bool,
    /// Bias the first two cross-attention heads towards the snippets around
    /// each query's start and end; the other heads stay global.
    pub boundary_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 32,
            model_dim: 64,
            heads: 4,
            decoder_layers: 2,
            scales: 3,
            ffn_mult: 2,
            num_classes: 4,
            streams: vec!["video".into()],
            residual_loc: true,
            boundary_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim < 4 || self.model_dim % 2 != 0 {
            return bad(format!("model_dim must be even and >= 4, got {}", self.model_dim));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.scales == 0 || self.decoder_layers == 0 || self.feat_dim == 0 || self.num_classes == 0 || self.ffn_mult == 0 {
            return bad("feat_dim, scales, decoder_layers, ffn_mult and num_classes must be positive".into());
        }
        if self.streams.is_empty() {
            return bad("at least one encoder stream is required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub input_conv: Linear,
    pub down_convs: Vec<Linear>,
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Global video feature `F_g` (all scales stacked along time).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub global: Array2<f64>,
    /// Row count of each scale, finest first.
    pub scale_lengths: Vec<usize>,
}

impl EncoderOutput {
    pub fn total_rows(&self) -> usize {
        self.scale_lengths.iter().sum()
    }
}

/// Tape handles for the three heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `N × (C+1)` class logits, background last.
    pub logits: Var,
    /// `N × 3`: start, end (signal space), predicted-IoU logit.
    pub loc: Var,
    /// `N × 1` completeness logit.
    pub completeness: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub proposal: TemporalProposal,
    /// Raw localization output in signal space (the clean-signal estimate).
    pub signal: SignalProposal,
    /// Probabilities over the `C` action classes followed by background.
    pub class_distribution: Vec<f64>,
    pub predicted_iou: f64,
    pub completeness: f64,
    pub score: f64,
    pub label: usize,
}

impl DetectionResult {
    /// Largest non-background class probability.
    pub fn class_confidence(&self) -> f64 {
        let c = self.class_distribution.len() - 1;
        self.class_distribution[self.label.min(c)]
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<Encoder>,
    pub projection: QueryProjection,
    pub time_embed: Linear,
    pub self_cond_embed: Linear,
    pub layers: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub loc_head: Linear,
    pub completeness_head: Linear,
}

impl DenoiserModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::domain::INIT, 0);
        let mut store = ParamStore::default();
        let d = config.model_dim;
        let hidden = d * config.ffn_mult;
        let encoders = config
            .streams
            .iter()
            .map(|s| {
                let name = format!("encoder.{s}");
                Encoder {
                    input_conv: Linear::new(&mut store, &format!("{name}.conv0"), KERNEL * config.feat_dim, d, true, &mut rng),
                    down_convs: (1..config.scales)
                        .map(|l| Linear::new(&mut store, &format!("{name}.conv{l}"), KERNEL * d, d, true, &mut rng))
                        .collect(),
                    attn: MultiHeadAttention::new(&mut store, &format!("{name}.attn"), d, config.heads, &mut rng),
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d),
                    ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, hidden, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        let projection = QueryProjection::new(&mut store, "proj", d, d, &mut rng);
        let time_embed = Linear::new(&mut store, "time.embed", d, d, true, &mut rng);
        let self_cond_embed = Linear::new(&mut store, "selfcond.embed", 2, d, false, &mut rng);
        let layers = (0..config.decoder_layers)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{name}.self"), d, config.heads, &mut rng),
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(&mut store, &format!("{name}.cross"), d, config.heads, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d),
                    ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, hidden, &mut rng),
                    norm3: LayerNorm::new(&mut store, &format!("{name}.norm3"), d),
                }
            })
            .collect();
        let class_head = Linear::new(&mut store, "head.class", d, config.num_classes + 1, true, &mut rng);
        let loc_head = Linear::new(&mut store, "head.loc", d, 3, true, &mut rng);
        let completeness_head = Linear::new(&mut store, "head.completeness", d, 1, true, &mut rng);
        Ok(Self {
            config,
            store,
            encoders,
            projection,
            time_embed,
            self_cond_embed,
            layers,
            class_head,
            loc_head,
            completeness_head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn stream_index(&self, name: &str) -> Option<usize> {
        self.config.streams.iter().position(|s| s == name)
    }

    /// Records the encoder for `stream` on `tape`. Returns `F_g` and the
    /// per-scale row counts.
    pub fn encode_on_tape(&self, tape: &mut Tape, stream: usize, features: &Array2<f64>) -> Result<(Var, Vec<usize>)> {
        let (t, f) = features.dim();
        if t == 0 {
            return Err(Error::InvalidArgument("empty snippet sequence".into()));
        }
        if f != self.config.feat_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature columns", self.config.feat_dim),
                actual: format!("{f}"),
            });
        }
        let enc = self.encoders.get(stream).ok_or_else(|| Error::InvalidArgument(format!("no encoder stream {stream}")))?;
        let store = &self.store;
        let x = tape.constant(features.clone());
        let cols = tape.im2col(x, KERNEL, 1, KERNEL / 2);
        let h = enc.input_conv.forward(tape, store, cols);
        let mut h = tape.silu(h);
        let mut per_scale = vec![h];
        for conv in &enc.down_convs {
            let cols = tape.im2col(h, KERNEL, 2, KERNEL / 2);
            let y = conv.forward(tape, store, cols);
            h = tape.silu(y);
            per_scale.push(h);
        }
        let mut outs = Vec::with_capacity(per_scale.len());
        let mut lengths = Vec::with_capacity(per_scale.len());
        for h in per_scale {
            let len = tape.value(h).nrows();
            lengths.push(len);
            let pe = tape.constant(positional_encoding(len, self.config.model_dim));
            let x = tape.add(h, pe);
            let a = enc.attn.forward(tape, store, x, x);
            let y = tape.add(x, a);
            let y = enc.norm1.forward(tape, store, y);
            let f = enc.ffn.forward(tape, store, y);
            let z = tape.add(y, f);
            outs.push(enc.norm2.forward(tape, store, z));
        }
        let fg = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
        Ok((fg, lengths))
    }

    pub fn encode(&self, stream: usize, features: &Array2<f64>) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let (fg, scale_lengths) = self.encode_on_tape(&mut tape, stream, features)?;
        Ok(EncoderOutput {
            global: tape.value(fg).clone(),
            scale_lengths,
        })
    }

    /// Expected encoder row count for `t` snippets.
    pub fn encoded_len(&self, t: usize) -> usize {
        let mut len = t;
        let mut total = t;
        for _ in 1..self.config.scales {
            len = conv_out_len(len, KERNEL, 2, KERNEL / 2);
            total += len;
        }
        total
    }

    /// Cross-attention bias for `sources` over an `F_g` with the given
    /// per-scale row counts: a Gaussian in normalized time around each
    /// proposal's start (head 0) and end (head 1). Empty when disabled.
    pub fn boundary_bias(&self, sources: &[SignalProposal], scale: f64, scale_lengths: &[usize]) -> Result<HeadBias> {
        if !self.config.boundary_heads || self.config.heads < 2 {
            return Ok(Vec::new());
        }
        let positions: Vec<f64> = scale_lengths
            .iter()
            .flat_map(|&len| (0..len).map(move |r| (r as f64 + 0.5) / len as f64))
            .collect();
        let mut start = Array2::zeros((sources.len(), positions.len()));
        let mut end = Array2::zeros((sources.len(), positions.len()));
        for (i, s) in sources.iter().enumerate() {
            let p = unscale_signal(&s.clamped(scale), scale)?;
            let sigma = (BOUNDARY_SPREAD * (p.end - p.start)).max(BOUNDARY_FLOOR);
            let k = -0.5 / (sigma * sigma);
            for (r, &x) in positions.iter().enumerate() {
                start[[i, r]] = k * (x - p.start).powi(2);
                end[[i, r]] = k * (x - p.end).powi(2);
            }
        }
        Ok(vec![Some(start), Some(end)])
    }

    /// Decoder `f_θ`: adds timestep and optional self-conditioning
    /// embeddings to `queries`, then runs the self-attention /
    /// cross-attention / feed-forward stack over `F_g`.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        queries: Var,
        global: Var,
        t: i64,
        self_cond: Option<&[SignalProposal]>,
        bias: &[Option<Array2<f64>>],
    ) -> Result<Var> {
        let store = &self.store;
        let d = self.config.model_dim;
        let (n, qd) = tape.value(queries).dim();
        if qd != d || tape.value(global).ncols() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("width {d}"),
                actual: format!("queries {qd}, context {}", tape.value(global).ncols()),
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("decode needs at least one query".into()));
        }
        if t < 0 {
            return Err(Error::TimestepOutOfRange { t, min: 0, max: i64::MAX });
        }
        let mut feats = vec![0.0; d];
        sinusoidal_scalar(t as f64, d, 1.0, &mut feats);
        let tf = tape.constant(Array2::from_shape_vec((1, d), feats).expect("row"));
        let temb = self.time_embed.forward(tape, store, tf);
        let mut x = tape.add_row(queries, temb);
        if let Some(prior) = self_cond {
            if prior.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} self-conditioning pairs"),
                    actual: format!("{}", prior.len()),
                });
            }
            let pairs = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { prior[i].start } else { prior[i].end });
            let p = tape.constant(pairs);
            let e = self.self_cond_embed.forward(tape, store, p);
            x = tape.add(x, e);
        }
        for layer in &self.layers {
            let a = layer.self_attn.forward(tape, store, x, x);
            let y = tape.add(x, a);
            let y = layer.norm1.forward(tape, store, y);
            let c = layer.cross_attn.forward_biased(tape, store, y, global, bias);
            let z = tape.add(y, c);
            let z = layer.norm2.forward(tape, store, z);
            let f = layer.ffn.forward(tape, store, z);
            let w = tape.add(z, f);
            x = layer.norm3.forward(tape, store, w);
        }
        Ok(x)
    }

    /// `reference` are the signal proposals the queries were projected
    /// from, one per decoded row.
    pub fn heads_on_tape(&self, tape: &mut Tape, decoded: Var, reference: &[SignalProposal], scale: f64) -> Result<HeadVars> {
        let store = &self.store;
        let n = tape.value(decoded).nrows();
        if reference.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} reference proposals"),
                actual: format!("{}", reference.len()),
            });
        }
        let mut loc = self.loc_head.forward(tape, store, decoded);
        if self.config.residual_loc {
            let base = Array2::from_shape_fn((n, 3), |(i, k)| {
                let r = reference[i].clamped(scale);
                [r.start, r.end, 0.0][k]
            });
            let base = tape.constant(base);
            loc = tape.add(loc, base);
        }
        Ok(HeadVars {
            logits: self.class_head.forward(tape, store, decoded),
            loc,
            completeness: self.completeness_head.forward(tape, store, decoded),
        })
    }

    /// Projects, decodes and applies the heads for one set of signal
    /// proposals. `refine` optionally replaces the projected queries first.
    pub fn denoise(
        &self,
        queries: &QuerySet,
        cond: &EncoderOutput,
        self_cond: Option<&[SignalProposal]>,
        scale: f64,
    ) -> Result<Vec<DetectionResult>> {
        let mut tape = Tape::new();
        let q = tape.constant(queries.embeddings.clone());
        let g = tape.constant(cond.global.clone());
        let bias = self.boundary_bias(&queries.sources, scale, &cond.scale_lengths)?;
        let fd = self.decode_on_tape(&mut tape, q, g, queries.timestep, self_cond, &bias)?;
        let heads = self.heads_on_tape(&mut tape, fd, &queries.sources, scale)?;
        apply_heads(&tape, &heads, scale)
    }
}

/// Sinusoidal encoding of each row's normalized center time.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, dim));
    let mut buf = vec![0.0; dim];
    for r in 0..len {
        let center = (r as f64 + 0.5) / len as f64 - 0.5;
        sinusoidal_scalar(center * COORDINATE_GAIN, dim, 1.0, &mut buf);
        pe.row_mut(r).assign(&ndarray::ArrayView1::from(&buf[..]));
    }
    pe
}

pub fn fuse_scores(p_bc: f64, p_c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_bc) || !(0.0..=1.0).contains(&p_c) {
        return Err(Error::InvalidValue(format!("scores must lie in [0,1], got ({p_bc}, {p_c})")));
    }
    Ok(0.5 * (p_bc + p_c))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Converts raw head outputs into scored detections.
pub fn apply_heads(tape: &Tape, heads: &HeadVars, scale: f64) -> Result<Vec<DetectionResult>> {
    let logits = tape.value(heads.logits);
    let loc = tape.value(heads.loc);
    let comp = tape.value(heads.completeness);
    let classes = logits.ncols() - 1;
    (0..logits.nrows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).to_vec();
            if row.iter().any(|x| !x.is_finite()) || !loc.row(i).iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidValue(format!("non-finite head output at query {i}")));
            }
            let dist = softmax(&row);
            let (label, &p_bc) = dist[..classes]
                .iter()
                .enumerate()
                .fold((0, &dist[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            let signal = SignalProposal::new(loc[[i, 0]], loc[[i, 1]]);
            let completeness = sigmoid(comp[[i, 0]]);
            Ok(DetectionResult {
                proposal: unscale_signal(&signal, scale)?,
                signal,
                predicted_iou: sigmoid(loc[[i, 2]]),
                score: fuse_scores(p_bc, completeness)?,
                completeness,
                class_distribution: dist,
                label,
            })
        })
        .collect()
}
