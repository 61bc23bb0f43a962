//! End-to-end helpers shared by the command line, the ablation sweeps and
//! the tests: train on a dataset, sample every video, score predictions.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, normalize, EvalReport};
use crate::model::DenoiserModel;
use crate::parallel;
use crate::rng;
use crate::sampler::{late_fuse, sample, PredictionRecord, SampleConfig, SamplingPlan, VideoDetections};
use crate::train::{train, StepMetrics, TrainSetup};

/// Builds a fresh model from `cfg` and trains it on `data`.
pub fn train_model<F>(cfg: &RunConfig, data: &Dataset, on_step: F) -> Result<(DenoiserModel, Vec<StepMetrics>)>
where
    F: FnMut(&StepMetrics, &DenoiserModel) -> Result<()>,
{
    cfg.validate()?;
    let mut model = DenoiserModel::new(cfg.model.clone(), cfg.seed)?;
    let sched = cfg.diffusion.schedule()?;
    let setup = TrainSetup {
        cfg: &cfg.train,
        sched: &sched,
        scale: cfg.diffusion.scale,
        fusion: cfg.data.fusion,
        seed: cfg.seed,
    };
    let log = train(&mut model, data, &setup, on_step)?;
    Ok((model, log))
}

/// Samples every video with `opts`. Each video and stream draws its initial
/// noise from its own stream of `seed`.
pub fn sample_dataset(model: &DenoiserModel, cfg: &RunConfig, opts: &SampleConfig, data: &Dataset, seed: u64) -> Result<Vec<VideoDetections>> {
    let sched = cfg.diffusion.schedule()?;
    let plan = SamplingPlan::new(cfg.diffusion.total_steps, opts.clone())?;
    let scale = cfg.diffusion.scale;
    let per_video = parallel::map_indexed(&data.videos, |v, video| -> Result<VideoDetections> {
        let mut fused: Option<VideoDetections> = None;
        for (stream, feats) in cfg.data.fusion.inputs(video) {
            let cond = model.encode(stream, &feats)?;
            let mut r = rng::stream2(seed, rng::domain::SAMPLE_VIDEO, v as u64, stream as u64);
            let out = sample(model, &cond, &plan, &sched, scale, &mut r)?;
            let dets = VideoDetections {
                video: video.id().to_string(),
                detections: out.detections,
            };
            fused = Some(match fused {
                None => dets,
                Some(prev) => late_fuse(&prev, &dets)?,
            });
        }
        fused.ok_or_else(|| Error::InvalidArgument("no encoder inputs".into()))
    });
    per_video.into_iter().collect()
}

pub fn to_records(data: &Dataset, detections: &[VideoDetections]) -> Vec<PredictionRecord> {
    detections
        .iter()
        .zip(&data.videos)
        .flat_map(|(d, v)| {
            let duration = v.annotation.duration;
            d.detections.iter().map(move |x| PredictionRecord::from_detection(&d.video, duration, x))
        })
        .collect()
}

pub fn score_records(records: &[PredictionRecord], data: &Dataset, classes: usize, thresholds: &[f64]) -> Result<EvalReport> {
    let annotations = data.annotations();
    let (preds, gts) = normalize(records, &annotations)?;
    evaluate(&preds, &gts, classes, thresholds, annotations.len())
}

/// Samples and scores in one go.
pub fn sample_and_score(
    model: &DenoiserModel,
    cfg: &RunConfig,
    opts: &SampleConfig,
    data: &Dataset,
    seed: u64,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let dets = sample_dataset(model, cfg, opts, data, seed)?;
    score_records(&to_records(data, &dets), data, cfg.model.num_classes, thresholds)
}
