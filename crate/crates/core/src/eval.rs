//! Detection metrics: per-class AP, mAP over IoU grids and AR@AN.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::AnnotatedVideo;
use crate::error::{Error, Result};
use crate::interval::{canonicalize, TemporalProposal};
use crate::sampler::PredictionRecord;

pub const THUMOS_GRID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const AR_BUDGETS: [usize; 3] = [50, 100, 500];

/// `[0.5:0.05:0.95]`.
pub fn activitynet_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// A scored detection in normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video: usize,
    pub interval: TemporalProposal,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video: usize,
    pub interval: TemporalProposal,
    pub class: usize,
}

/// TP flags for `preds` (sorted by descending score) against `gts`. A
/// prediction matches the unmatched ground truth of its video and class with
/// the highest IoU, if that IoU reaches `threshold`; ties go to the earlier
/// ground truth.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruth], threshold: f64) -> Result<Vec<bool>> {
    if preds.windows(2).any(|w| w[1].score > w[0].score) {
        return Err(Error::InvalidArgument("predictions must be sorted by descending score".into()));
    }
    let mut used = vec![false; gts.len()];
    Ok(preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.video != p.video || gt.class != p.class {
                    continue;
                }
                let iou = p.interval.iou(&gt.interval);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect())
}

/// Area under the precision-recall curve with the precision envelope.
/// Returns 0 without ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev_recall {
            let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// AP of every class at one threshold. Classes with neither ground truth nor
/// predictions are `None` and excluded from the mean.
pub fn per_class_ap(preds: &[Detection], gts: &[GroundTruth], classes: usize, threshold: f64) -> Result<Vec<Option<f64>>> {
    (0..classes)
        .map(|c| {
            let mut p: Vec<Detection> = preds.iter().filter(|d| d.class == c).cloned().collect();
            // stable, so equal scores keep input order
            p.sort_by(|a, b| b.score.total_cmp(&a.score));
            let g: Vec<GroundTruth> = gts.iter().filter(|x| x.class == c).cloned().collect();
            if p.is_empty() && g.is_empty() {
                return Ok(None);
            }
            let flags = match_detections(&p, &g, threshold)?;
            Ok(Some(average_precision(&flags, g.len())))
        })
        .collect()
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_map: f64,
    /// `per_class[c][k]` at `thresholds[k]`.
    pub per_class: Vec<Vec<Option<f64>>>,
}

pub fn map_over_thresholds(preds: &[Detection], gts: &[GroundTruth], classes: usize, thresholds: &[f64]) -> Result<MapReport> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds".into()));
    }
    let mut per_class = vec![Vec::with_capacity(thresholds.len()); classes];
    let mut map = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let aps = per_class_ap(preds, gts, classes, thr)?;
        map.push(mean_defined(&aps));
        for (c, ap) in aps.into_iter().enumerate() {
            per_class[c].push(ap);
        }
    }
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        average_map: map.iter().sum::<f64>() / map.len() as f64,
        map,
        per_class,
    })
}

/// Class-agnostic recall of the top-`n` detections per video, averaged over
/// `iou_grid`, for each budget `n`.
pub fn ar_at_an(preds: &[Detection], gts: &[GroundTruth], budgets: &[usize], iou_grid: &[f64]) -> Result<Vec<(usize, f64)>> {
    if budgets.contains(&0) || iou_grid.is_empty() {
        return Err(Error::InvalidArgument("budgets must be positive and the IoU grid non-empty".into()));
    }
    let mut by_video: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    for p in preds {
        by_video.entry(p.video).or_default().push(p);
    }
    for v in by_video.values_mut() {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(budgets
        .iter()
        .map(|&n| {
            if gts.is_empty() {
                return (n, 0.0);
            }
            let mut total = 0.0;
            for &thr in iou_grid {
                let hit = gts
                    .iter()
                    .filter(|g| {
                        by_video
                            .get(&g.video)
                            .is_some_and(|ps| ps.iter().take(n).any(|p| p.interval.iou(&g.interval) >= thr))
                    })
                    .count();
                total += hit as f64 / gts.len() as f64;
            }
            (n, total / iou_grid.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: MapReport,
    pub recall: Vec<(usize, f64)>,
    pub videos: usize,
    pub instances: usize,
    pub predictions: usize,
}

/// Converts prediction records and annotations to normalized time. Records
/// of unknown videos are an error.
pub fn normalize(records: &[PredictionRecord], annotations: &[AnnotatedVideo]) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let index: BTreeMap<&str, usize> = annotations.iter().enumerate().map(|(i, a)| (a.id.as_str(), i)).collect();
    let preds = records
        .iter()
        .map(|r| {
            let &v = index
                .get(r.video.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("prediction for unknown video {}", r.video)))?;
            let d = annotations[v].duration;
            Ok(Detection {
                video: v,
                interval: canonicalize(r.start / d, r.end / d)?,
                class: r.class,
                score: r.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gts = annotations
        .iter()
        .enumerate()
        .flat_map(|(v, a)| {
            a.targets().into_iter().map(move |t| GroundTruth {
                video: v,
                interval: t.interval,
                class: t.class,
            })
        })
        .collect();
    Ok((preds, gts))
}

pub fn evaluate(preds: &[Detection], gts: &[GroundTruth], classes: usize, thresholds: &[f64], videos: usize) -> Result<EvalReport> {
    Ok(EvalReport {
        map: map_over_thresholds(preds, gts, classes, thresholds)?,
        recall: ar_at_an(preds, gts, &AR_BUDGETS, &activitynet_grid())?,
        videos,
        instances: gts.len(),
        predictions: preds.len(),
    })
}

/// Machine-readable `key = value` lines.
pub fn format_metrics(r: &EvalReport) -> String {
    let mut s = String::new();
    for (t, m) in r.map.thresholds.iter().zip(&r.map.map) {
        let _ = writeln!(s, "map@{t:.2} = {m}");
    }
    let _ = writeln!(s, "average_map = {}", r.map.average_map);
    for (n, ar) in &r.recall {
        let _ = writeln!(s, "ar@{n} = {ar}");
    }
    let _ = writeln!(s, "videos = {}", r.videos);
    let _ = writeln!(s, "instances = {}", r.instances);
    let _ = writeln!(s, "predictions = {}", r.predictions);
    s
}

/// Human-readable table.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "videos {}  instances {}  predictions {}", r.videos, r.instances, r.predictions);
    let _ = write!(s, "{:<8}", "class");
    for t in &r.map.thresholds {
        let _ = write!(s, "{:>8.2}", t);
    }
    let _ = writeln!(s);
    for (c, row) in r.map.per_class.iter().enumerate() {
        let _ = write!(s, "{c:<8}");
        for ap in row {
            match ap {
                Some(v) => {
                    let _ = write!(s, "{:>8.4}", v);
                }
                None => {
                    let _ = write!(s, "{:>8}", "-");
                }
            }
        }
        let _ = writeln!(s);
    }
    let _ = write!(s, "{:<8}", "mAP");
    for m in &r.map.map {
        let _ = write!(s, "{:>8.4}", m);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "average mAP {:.4}", r.map.average_map);
    for (n, ar) in &r.recall {
        let _ = writeln!(s, "AR@{n} {ar:.4}");
    }
    s
}
