//! Training: pad ground truth to a fixed proposal count, corrupt it, decode
//! with self-conditioning and selective conditioning, assign targets by
//! top-k transport and step the optimizer.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assign::{ot_assign, Assignment, DEFAULT_TOP_K};
use crate::autodiff::Tape;
use crate::codec::{scale_signal, unscale_signal, SignalProposal};
use crate::conditioning::{
    apply_training_rate, mask_selection, to_pair_lists, ConditioningState, SelectionRule, DEFAULT_GAMMA, DEFAULT_TRAINING_RATE,
};
use crate::data::{Dataset, Modality, Video};
use crate::error::{Error, Result};
use crate::interval::{canonicalize, TemporalProposal};
use crate::loss::{cost_matrix, one_to_one_quality, quality_targets, set_prediction_loss_with_quality, HeadOutputs, LossBreakdown, LossWeights, Target};
use crate::model::DenoiserModel;
use crate::nn::{Adam, Grads};
use crate::parallel;
use crate::rng;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_TRAIN_PROPOSALS: usize = 30;
pub const DEFAULT_JITTER: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Videos per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// `N_train`.
    pub proposals: usize,
    pub top_k: usize,
    /// Supervise completeness and predicted IoU on each ground truth's best
    /// prediction only, so duplicates learn low quality.
    pub one_to_one_quality: bool,
    /// Standard deviation of the padding jitter in normalized time.
    pub jitter: f64,
    pub self_condition_rate: f64,
    pub conditioning_rate: f64,
    pub gamma: f64,
    pub rule: SelectionRule,
    pub weights: LossWeights,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            proposals: DEFAULT_TRAIN_PROPOSALS,
            top_k: DEFAULT_TOP_K,
            one_to_one_quality: false,
            jitter: DEFAULT_JITTER,
            self_condition_rate: DEFAULT_TRAINING_RATE,
            conditioning_rate: DEFAULT_TRAINING_RATE,
            gamma: DEFAULT_GAMMA,
            rule: SelectionRule::Difference,
            weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch == 0 || self.proposals == 0 || self.top_k == 0 {
            return bad("batch, proposals and top_k must be positive".into());
        }
        if self.top_k > self.proposals {
            return bad(format!("top_k {} exceeds proposals {}", self.top_k, self.proposals));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.jitter >= 0.0) {
            return bad("lr, weight_decay and jitter must be non-negative".into());
        }
        for (name, r) in [("self_condition_rate", self.self_condition_rate), ("conditioning_rate", self.conditioning_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [-1, 1]", self.gamma));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// How the two modalities reach the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Rgb,
    Flow,
    /// Concatenated rgb and flow columns into one encoder.
    #[default]
    Early,
    /// One encoder per modality, denoised separately, detections merged.
    Late,
}

impl Fusion {
    pub fn streams(self) -> Vec<String> {
        match self {
            Fusion::Late => vec!["rgb".into(), "flow".into()],
            _ => vec!["video".into()],
        }
    }

    /// Encoder input width given per-modality feature width.
    pub fn feat_dim(self, modality_dim: usize) -> usize {
        match self {
            Fusion::Early => 2 * modality_dim,
            _ => modality_dim,
        }
    }

    /// `(stream index, snippet matrix)` per encoder pass for one video.
    pub fn inputs(self, video: &Video) -> Vec<(usize, Array2<f64>)> {
        match self {
            Fusion::Rgb => vec![(0, video.rgb.to_f64())],
            Fusion::Flow => vec![(0, video.flow.to_f64())],
            Fusion::Early => {
                let (r, f) = (video.rgb.to_f64(), video.flow.to_f64());
                vec![(0, concatenate(Axis(1), &[r.view(), f.view()]).expect("equal snippet counts"))]
            }
            Fusion::Late => Modality::ALL.iter().enumerate().map(|(i, &m)| (i, video.modality(m).to_f64())).collect(),
        }
    }
}

/// Padded clean proposals in signal space and the ground truth each came
/// from (`None` for background-only filler).
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub signals: Vec<SignalProposal>,
    pub source: Vec<Option<usize>>,
}

/// Repeats ground truth cyclically with Gaussian jitter up to `n`. Videos
/// without instances get standard-normal signal pairs.
pub fn pad_ground_truth<R: Rng>(targets: &[Target], n: usize, jitter: f64, scale: f64, rng: &mut R) -> Result<Padded> {
    if targets.is_empty() {
        let signals = (0..n)
            .map(|_| SignalProposal::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        return Ok(Padded {
            signals,
            source: vec![None; n],
        });
    }
    let noise = Normal::new(0.0, jitter).map_err(|e| Error::InvalidArgument(format!("jitter {jitter}: {e}")))?;
    let mut signals = Vec::with_capacity(n);
    let mut source = Vec::with_capacity(n);
    for i in 0..n {
        let g = i % targets.len();
        let tp = targets[g].interval;
        // the first copy of each instance is exact
        let p = if i < targets.len() || jitter == 0.0 {
            tp
        } else {
            canonicalize(tp.start + rng.sample(noise), tp.end + rng.sample(noise))?
        };
        signals.push(scale_signal(&p, scale)?);
        source.push(Some(g));
    }
    Ok(Padded { signals, source })
}

/// Draws one timestep in `[1, T]` for the whole video (or uses `forced`)
/// and corrupts every padded proposal.
pub fn corruption_step<R: Rng>(
    padded: &[SignalProposal],
    sched: &NoiseSchedule,
    rng: &mut R,
    forced: Option<usize>,
) -> Result<(usize, Vec<SignalProposal>)> {
    let drawn = rng.random_range(1..=sched.total_steps());
    let t = forced.unwrap_or(drawn);
    let z0: Vec<f64> = padded.iter().flat_map(|s| [s.start, s.end]).collect();
    let eps: Vec<f64> = (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let zt = sched.corrupt(&z0, t, &eps)?;
    Ok((t, zt.chunks_exact(2).map(|c| SignalProposal::new(c[0], c[1])).collect()))
}

/// Random draws of one training element, made before any model evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedElement {
    pub t: usize,
    pub noisy: Vec<SignalProposal>,
    pub run_estimate: bool,
    pub conditioning_mask: Vec<bool>,
}

pub fn prepare_element<R: Rng>(
    targets: &[Target],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    scale: f64,
    rng: &mut R,
    forced_t: Option<usize>,
) -> Result<PreparedElement> {
    let padded = pad_ground_truth(targets, cfg.proposals, cfg.jitter, scale, rng)?;
    let (t, noisy) = corruption_step(&padded.signals, sched, rng, forced_t)?;
    let run_estimate = rng.random_bool(cfg.self_condition_rate);
    let conditioning_mask = apply_training_rate(cfg.proposals, cfg.conditioning_rate, rng)?;
    Ok(PreparedElement {
        t,
        noisy,
        run_estimate,
        conditioning_mask,
    })
}

/// Everything the loss treats as a constant. Returned by
/// [`element_forward_backward`] and accepted back to hold it fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub estimate: Option<Vec<SignalProposal>>,
    pub assignment: Assignment,
    pub quality: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ElementOutcome {
    pub loss: LossBreakdown,
    pub grads: Grads,
    pub detached: Detached,
}

/// Clean-signal estimate of a decoder pass with a zero prior, evaluated off
/// the gradient tape.
pub fn self_condition_estimate(
    model: &DenoiserModel,
    queries: &Array2<f64>,
    sources: &[SignalProposal],
    global: &Array2<f64>,
    bias: &[Option<Array2<f64>>],
    t: usize,
    scale: f64,
) -> Result<Vec<SignalProposal>> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let g = tape.constant(global.clone());
    let fd = model.decode_on_tape(&mut tape, q, g, t as i64, None, bias)?;
    let heads = model.heads_on_tape(&mut tape, fd, sources, scale)?;
    let loc = tape.value(heads.loc);
    Ok((0..loc.nrows()).map(|i| SignalProposal::new(loc[[i, 0]], loc[[i, 1]]).clamped(scale)).collect())
}

/// Forward pass, loss and parameter gradient of one element.
#[allow(clippy::too_many_arguments)]
pub fn element_forward_backward(
    model: &DenoiserModel,
    stream: usize,
    features: &Array2<f64>,
    targets: &[Target],
    prep: &PreparedElement,
    cfg: &TrainConfig,
    scale: f64,
    frozen: Option<&Detached>,
) -> Result<ElementOutcome> {
    let n = prep.noisy.len();
    let mut tape = Tape::new();
    let (fg, lengths) = model.encode_on_tape(&mut tape, stream, features)?;
    let bias = model.boundary_bias(&prep.noisy, scale, &lengths)?;
    let mut q = model.projection.forward(&mut tape, &model.store, &prep.noisy, scale)?;
    let estimate = match frozen {
        Some(d) => d.estimate.clone(),
        None if prep.run_estimate => Some(self_condition_estimate(model, tape.value(q), &prep.noisy, tape.value(fg), &bias, prep.t, scale)?),
        None => None,
    };
    if let Some(est) = &estimate {
        // the estimate stands in for the previous step's denoised references
        let current: Vec<TemporalProposal> = prep.noisy.iter().map(|s| unscale_signal(s, scale)).collect::<Result<_>>()?;
        let state = ConditioningState {
            embeddings: tape.value(q).clone(),
            proposals: est.iter().map(|s| unscale_signal(s, scale)).collect::<Result<_>>()?,
        };
        let sel = state.select(tape.value(q), &current, cfg.gamma, cfg.rule)?;
        let sel = mask_selection(&sel, &prep.conditioning_mask);
        if !sel.only_self_pairs() {
            q = tape.refine(q, to_pair_lists(&sel, n));
        }
    }
    let fd = model.decode_on_tape(&mut tape, q, fg, prep.t as i64, estimate.as_deref(), &bias)?;
    let heads = model.heads_on_tape(&mut tape, fd, &prep.noisy, scale)?;
    let outputs = HeadOutputs {
        logits: tape.value(heads.logits).clone(),
        loc: tape.value(heads.loc).clone(),
        completeness: tape.value(heads.completeness).clone(),
    };
    let (assignment, quality) = match frozen {
        Some(d) => (d.assignment.clone(), d.quality.clone()),
        None => {
            let cost = cost_matrix(&outputs, targets, &cfg.weights, scale);
            let a = ot_assign(&cost, cfg.top_k.min(n))?;
            let mut q = quality_targets(&outputs, &a, targets, scale);
            if cfg.one_to_one_quality {
                one_to_one_quality(&mut q, &a);
            }
            (a, q)
        }
    };
    let (loss, g) = set_prediction_loss_with_quality(&outputs, &assignment, targets, &cfg.weights, scale, &quality)?;
    let grads = tape.backward(
        &model.store,
        &[(heads.logits, g.logits), (heads.loc, g.loc), (heads.completeness, g.completeness)],
    );
    Ok(ElementOutcome {
        loss,
        grads,
        detached: Detached {
            estimate,
            assignment,
            quality,
        },
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_iou: f64,
    pub loss_comp: f64,
    pub lr: f64,
    pub t_mean: f64,
}

/// Video indices of every optimizer step: a fresh seeded permutation per
/// pass over the data.
pub fn batch_indices(seed: u64, num_videos: usize, step: usize, batch: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| {
            let g = step * batch + b;
            let (epoch, pos) = (g / num_videos, g % num_videos);
            permutation(seed, num_videos, epoch)[pos]
        })
        .collect()
}

fn permutation(seed: u64, n: usize, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r: ChaCha8Rng = rng::stream(seed, rng::domain::SHUFFLE, epoch as u64);
    idx.shuffle(&mut r);
    idx
}

/// Everything [`train`] needs besides the model and data.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub cfg: &'a TrainConfig,
    pub sched: &'a NoiseSchedule,
    pub scale: f64,
    pub fusion: Fusion,
    pub seed: u64,
}

/// Runs `cfg.steps` optimizer steps. `on_step` sees every step's metrics
/// and may stop training by returning an error.
pub fn train<F>(model: &mut DenoiserModel, data: &Dataset, setup: &TrainSetup, mut on_step: F) -> Result<Vec<StepMetrics>>
where
    F: FnMut(&StepMetrics, &DenoiserModel) -> Result<()>,
{
    let cfg = setup.cfg;
    cfg.validate()?;
    if data.videos.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one video".into()));
    }
    let targets: Vec<Vec<Target>> = data.videos.iter().map(|v| v.annotation.targets()).collect();
    let inputs: Vec<Vec<(usize, Array2<f64>)>> = data.videos.iter().map(|v| setup.fusion.inputs(v)).collect();
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let videos = batch_indices(setup.seed, data.videos.len(), step, cfg.batch);
        let elements: Vec<(usize, usize)> = videos
            .iter()
            .flat_map(|&v| (0..inputs[v].len()).map(move |s| (v, s)))
            .collect();
        let current: &DenoiserModel = model;
        let outcomes = parallel::map_indexed(&elements, |e, &(v, s)| -> Result<(usize, ElementOutcome)> {
            let mut r = rng::stream2(setup.seed, rng::domain::TRAIN_ELEMENT, step as u64, e as u64);
            let prep = prepare_element(&targets[v], cfg, setup.sched, setup.scale, &mut r, None)?;
            let (stream, feats) = &inputs[v][s];
            let out = element_forward_backward(current, *stream, feats, &targets[v], &prep, cfg, setup.scale, None)?;
            Ok((prep.t, out))
        });
        let batch_ids = || videos.iter().map(|&v| data.videos[v].id()).collect::<Vec<_>>().join(",");
        let mut grads = Grads::zeros_like(&model.store);
        let mut loss = LossBreakdown::default();
        let mut t_sum = 0.0;
        for o in outcomes {
            let (t, o) = o.map_err(|e| Error::Divergence {
                step,
                batch: batch_ids(),
                detail: e.to_string(),
            })?;
            grads.add_assign(&o.grads);
            loss.add(&o.loss);
            t_sum += t as f64;
        }
        let k = 1.0 / elements.len() as f64;
        grads.scale(k);
        for x in [&mut loss.total, &mut loss.cls, &mut loss.l1, &mut loss.iou, &mut loss.comp] {
            *x *= k;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                step,
                batch: batch_ids(),
                detail: format!("loss {loss:?}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        adam.step(&mut model.store, &grads);
        let m = StepMetrics {
            step: step + 1,
            loss_total: loss.total,
            loss_cls: loss.cls,
            loss_l1: loss.l1,
            loss_iou: loss.iou,
            loss_comp: loss.comp,
            lr: cfg.lr,
            t_mean: t_sum * k,
        };
        on_step(&m, model)?;
        log.push(m);
    }
    Ok(log)
}
