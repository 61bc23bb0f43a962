//! Iterative proposal denoising from Gaussian noise with deterministic DDIM
//! updates and per-step selective conditioning.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::refine_forward;
use crate::codec::{unscale_signal, SignalProposal};
use crate::conditioning::{ConditioningState, PairSelection, SelectionRule, DEFAULT_GAMMA};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::interval::{nms, TemporalProposal};
use crate::model::{DenoiserModel, DetectionResult, EncoderOutput};
use crate::schedule::NoiseSchedule;

pub use crate::model::fuse_scores;

pub const DEFAULT_SAMPLING_STEPS: usize = 10;
pub const DEFAULT_PROPOSALS: usize = 30;

/// Sampling options. The same struct is the `[sample]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub proposals: usize,
    /// DDIM re-noising between steps; off feeds each prediction straight
    /// into the next step.
    pub iterative: bool,
    pub selective: bool,
    /// Feed the previous step's clean estimate back into the decoder.
    pub self_condition: bool,
    pub gamma: f64,
    pub rule: SelectionRule,
    /// Replace proposals scoring below this value with fresh noise after
    /// every intermediate step.
    pub renewal: Option<f64>,
    /// Per-class NMS threshold applied to the final detections.
    pub nms: Option<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLING_STEPS,
            proposals: DEFAULT_PROPOSALS,
            iterative: true,
            selective: true,
            self_condition: true,
            gamma: DEFAULT_GAMMA,
            rule: SelectionRule::Difference,
            renewal: None,
            nms: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposals == 0 {
            return Err(Error::Config("sample.proposals must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("sample.gamma {} outside [-1, 1]", self.gamma)));
        }
        if let Some(t) = self.nms {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("sample.nms {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub time_pairs: Vec<(i64, i64)>,
    pub options: SampleConfig,
}

impl SamplingPlan {
    pub fn new(total_steps: usize, options: SampleConfig) -> Result<Self> {
        options.validate()?;
        Ok(Self {
            time_pairs: make_time_pairs(total_steps, options.steps)?,
            options,
        })
    }
}

/// `reversed(linspace(-1, T, steps + 1))`, rounded and deduplicated, then
/// zipped into consecutive `(t_now, t_next)` pairs.
pub fn make_time_pairs(total_steps: usize, steps: usize) -> Result<Vec<(i64, i64)>> {
    if steps == 0 || steps > total_steps + 1 {
        return Err(Error::InvalidArgument(format!("sampling steps {steps} not in [1, {}]", total_steps + 1)));
    }
    let span = total_steps as f64 + 1.0;
    let mut times: Vec<i64> = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = (-1.0 + span * k as f64 / steps as f64).round() as i64;
        if times.last() != Some(&t) {
            times.push(t);
        }
    }
    times.reverse();
    Ok(times.windows(2).map(|w| (w[0], w[1])).collect())
}

/// One deterministic DDIM update (η = 0), clamped to `[-scale, scale]`.
pub fn ddim_step(zt: &[f64], x0_hat: &[f64], t_now: i64, t_next: i64, sched: &NoiseSchedule, scale: f64) -> Result<Vec<f64>> {
    if t_now < 0 || t_next < -1 || t_next >= t_now {
        return Err(Error::InvalidArgument(format!("invalid DDIM pair ({t_now}, {t_next})")));
    }
    if zt.len() != x0_hat.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} elements", zt.len()),
            actual: format!("{}", x0_hat.len()),
        });
    }
    let a_now = sched.alpha_bar_at(t_now)?;
    let a_next = sched.alpha_bar_at(t_next)?;
    let noise_now = (1.0 - a_now).sqrt();
    let (sa_now, sa_next, sn_next) = (a_now.sqrt(), a_next.sqrt(), (1.0 - a_next).sqrt());
    Ok(zt
        .iter()
        .zip(x0_hat)
        .map(|(&z, &x0)| {
            let eps = if noise_now == 0.0 { 0.0 } else { (z - sa_now * x0) / noise_now };
            let next = if sn_next == 0.0 { x0 } else { sa_next * x0 + sn_next * eps };
            next.clamp(-scale, scale)
        })
        .collect())
}

/// What the sampler needs from a denoising model.
pub trait Denoiser: Sync {
    type Condition: Sync;

    /// Query embeddings of the current signal proposals.
    fn embed(&self, signals: &[SignalProposal], scale: f64) -> Result<Array2<f64>>;

    /// `sources` are the signal proposals behind `queries`.
    fn predict(
        &self,
        cond: &Self::Condition,
        queries: &Array2<f64>,
        sources: &[SignalProposal],
        t: i64,
        self_cond: Option<&[SignalProposal]>,
        scale: f64,
    ) -> Result<Vec<DetectionResult>>;
}

impl Denoiser for DenoiserModel {
    type Condition = EncoderOutput;

    fn embed(&self, signals: &[SignalProposal], scale: f64) -> Result<Array2<f64>> {
        let mut tape = crate::autodiff::Tape::new();
        let q = self.projection.forward(&mut tape, &self.store, signals, scale)?;
        Ok(tape.value(q).clone())
    }

    fn predict(
        &self,
        cond: &EncoderOutput,
        queries: &Array2<f64>,
        sources: &[SignalProposal],
        t: i64,
        self_cond: Option<&[SignalProposal]>,
        scale: f64,
    ) -> Result<Vec<DetectionResult>> {
        let qs = crate::codec::QuerySet {
            embeddings: queries.clone(),
            sources: sources.to_vec(),
            timestep: t,
        };
        self.denoise(&qs, cond, self_cond, scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t_now: i64,
    pub t_next: i64,
    /// Signal proposals entering this step.
    pub input: Vec<SignalProposal>,
    pub selection: Option<PairSelection>,
    pub detections: Vec<DetectionResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub steps: Vec<StepRecord>,
    pub detections: Vec<DetectionResult>,
}

/// Refinement attention with keys = values = the queries themselves.
pub fn refine_with_selection(queries: &Array2<f64>, selection: &PairSelection) -> Array2<f64> {
    if selection.only_self_pairs() {
        return queries.clone();
    }
    let scale = 1.0 / (queries.ncols() as f64).sqrt();
    refine_forward(queries, &selection.partner_lists(queries.nrows()), scale).0
}

fn to_proposals(signals: &[SignalProposal], scale: f64) -> Result<Vec<TemporalProposal>> {
    signals.iter().map(|s| unscale_signal(s, scale)).collect()
}

fn gaussian_pair<R: Rng>(rng: &mut R) -> SignalProposal {
    SignalProposal::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

pub fn sample<D: Denoiser, R: Rng>(
    model: &D,
    cond: &D::Condition,
    plan: &SamplingPlan,
    sched: &NoiseSchedule,
    scale: f64,
    rng: &mut R,
) -> Result<SampleOutput> {
    let opts = &plan.options;
    let mut z: Vec<SignalProposal> = (0..opts.proposals).map(|_| gaussian_pair(rng)).collect();
    let mut previous: Option<ConditioningState> = None;
    let mut estimate: Option<Vec<SignalProposal>> = None;
    let mut steps = Vec::with_capacity(plan.time_pairs.len());
    for &(t_now, t_next) in &plan.time_pairs {
        let mut queries = model.embed(&z, scale)?;
        let mut selection = None;
        if opts.selective {
            if let Some(prev) = &previous {
                let sel = prev.select(&queries, &to_proposals(&z, scale)?, opts.gamma, opts.rule)?;
                queries = refine_with_selection(&queries, &sel);
                selection = Some(sel);
            }
        }
        let self_cond = if opts.self_condition { estimate.as_deref() } else { None };
        let detections = model.predict(cond, &queries, &z, t_now, self_cond, scale)?;
        if detections.len() != z.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} detections", z.len()),
                actual: format!("{}", detections.len()),
            });
        }
        let x0: Vec<SignalProposal> = detections.iter().map(|d| d.signal.clamped(scale)).collect();
        let next: Vec<SignalProposal> = if opts.iterative {
            let flat = |v: &[SignalProposal]| -> Vec<f64> { v.iter().flat_map(|s| [s.start, s.end]).collect() };
            let stepped = ddim_step(&flat(&z), &flat(&x0), t_now, t_next, sched, scale)?;
            stepped.chunks_exact(2).map(|c| SignalProposal::new(c[0], c[1])).collect()
        } else {
            x0.clone()
        };
        let mut next = next;
        if let (Some(thr), true) = (opts.renewal, t_next >= 0) {
            for (slot, d) in next.iter_mut().zip(&detections) {
                if d.score < thr {
                    *slot = gaussian_pair(rng);
                }
            }
        }
        previous = Some(ConditioningState {
            embeddings: queries,
            proposals: to_proposals(&x0, scale)?,
        });
        estimate = Some(x0);
        steps.push(StepRecord {
            t_now,
            t_next,
            input: std::mem::replace(&mut z, next),
            selection,
            detections,
        });
    }
    // final boundaries come from the terminal state, which at t = -1 is the
    // clamped clean estimate
    let mut detections = steps.last().map(|s| s.detections.clone()).unwrap_or_default();
    for (d, s) in detections.iter_mut().zip(&z) {
        d.signal = *s;
        d.proposal = unscale_signal(s, scale)?;
    }
    let detections = match opts.nms {
        Some(thr) => class_nms(detections, thr)?,
        None => detections,
    };
    Ok(SampleOutput { steps, detections })
}

/// Greedy NMS within each predicted class; output sorted by score.
pub fn class_nms(detections: Vec<DetectionResult>, threshold: f64) -> Result<Vec<DetectionResult>> {
    let mut keep = vec![false; detections.len()];
    let mut labels: Vec<usize> = detections.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        let idx: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].label == label).collect();
        let props: Vec<_> = idx.iter().map(|&i| detections[i].proposal).collect();
        let scores: Vec<_> = idx.iter().map(|&i| detections[i].score).collect();
        for k in nms(&props, &scores, threshold)? {
            keep[idx[k]] = true;
        }
    }
    let mut out: Vec<DetectionResult> = detections.into_iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d).collect();
    sort_by_score(&mut out);
    Ok(out)
}

fn sort_by_score(d: &mut [DetectionResult]) {
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Detections of one video from one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDetections {
    pub video: String,
    pub detections: Vec<DetectionResult>,
}

/// Union of both streams' detections re-ranked by fused score (stable, so
/// equal scores keep rgb before flow).
pub fn late_fuse(rgb: &VideoDetections, flow: &VideoDetections) -> Result<VideoDetections> {
    if rgb.video != flow.video {
        return Err(Error::InvalidArgument(format!("late fusion of different videos {} and {}", rgb.video, flow.video)));
    }
    let mut detections: Vec<_> = rgb.detections.iter().chain(&flow.detections).cloned().collect();
    sort_by_score(&mut detections);
    Ok(VideoDetections {
        video: rgb.video.clone(),
        detections,
    })
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub video: String,
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

impl PredictionRecord {
    pub fn from_detection(video: &str, duration: f64, d: &DetectionResult) -> Self {
        Self {
            video: video.to_string(),
            start: d.proposal.start * duration,
            end: d.proposal.end * duration,
            class: d.label,
            score: d.score,
        }
    }
}

/// Sorts by video, then score descending. Equal keys keep input order.
pub fn sort_records(records: &mut [PredictionRecord]) {
    records.sort_by(|a, b| a.video.cmp(&b.video).then(b.score.total_cmp(&a.score)));
}

/// Tab-separated records, preceded by `#`-prefixed header lines.
pub fn format_predictions(records: &[PredictionRecord], header: &str) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = String::new();
    for line in header.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    for r in &sorted {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.video, r.start, r.end, r.class, r.score));
    }
    out
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord], header: &str) -> Result<()> {
    write_atomic(path, format_predictions(records, header).as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number")).and_then(|x| if x.is_finite() { Ok(x) } else { Err(bad("non-finite number")) });
        out.push(PredictionRecord {
            video: f[0].to_string(),
            start: num(f[1])?,
            end: num(f[2])?,
            class: f[3].parse().map_err(|_| bad("bad class index"))?,
            score: num(f[4])?,
        });
    }
    Ok(out)
}

/// The run configuration echoed in a prediction file's header, if any.
pub fn read_prediction_header(path: &Path) -> Result<Option<crate::config::RunConfig>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: String = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{}\n", l.strip_prefix("# ").unwrap_or(&l[1..])))
        .collect();
    if header.trim().is_empty() {
        return Ok(None);
    }
    crate::config::RunConfig::from_toml(&header)
        .map(Some)
        .map_err(|e| Error::format(path, format!("config header: {e}")))
}
