//! Synthetic datasets and the on-disk feature and annotation formats.
//!
//! A dataset directory holds `annotations.jsonl` (one video per line) and one
//! feature file per video and modality, `<id>.<modality>.feat`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::TemporalProposal;
use crate::loss::Target;
use crate::parallel;
use crate::rng;

pub const FEATURE_MAGIC: [u8; 8] = *b"DTADFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Flow];

    pub fn code(self) -> u32 {
        match self {
            Modality::Rgb => 0,
            Modality::Flow => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Modality::Rgb),
            1 => Some(Modality::Flow),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        }
    }
}

/// One modality's snippet matrix for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub modality: Modality,
    /// `T_snippets × D_feat`.
    pub snippets: Array2<f32>,
}

impl VideoFeatures {
    pub fn to_f64(&self) -> Array2<f64> {
        self.snippets.mapv(f64::from)
    }
}

pub fn feature_path(dir: &Path, id: &str, modality: Modality) -> PathBuf {
    dir.join(format!("{id}.{}.feat", modality.name()))
}

pub fn write_features(vf: &VideoFeatures, path: &Path) -> Result<()> {
    let (t, d) = vf.snippets.dim();
    if vf.snippets.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidValue(format!("non-finite feature in video {}", vf.id)));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(&FEATURE_MAGIC);
    for v in [FEATURE_VERSION, to_u32(t)?, to_u32(d)?, vf.modality.code()] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in vf.snippets.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} overflows the header")))
}

/// Reads a feature file; the video id is the file name up to the first `.`.
pub fn read_features(path: &Path) -> Result<VideoFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    let version = field(0);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (t, d) = (field(1) as usize, field(2) as usize);
    let modality = Modality::from_code(field(3)).ok_or_else(|| Error::format(path, format!("unknown modality code {}", field(3))))?;
    if t == 0 || d == 0 {
        return Err(Error::format(path, "empty feature matrix"));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let expected = HEADER_LEN + payload;
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.into(),
                expected,
                found: bytes.len(),
            });
        }
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, "non-finite feature value"));
    }
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('.').next())
        .unwrap_or_default()
        .to_string();
    Ok(VideoFeatures {
        id,
        modality,
        snippets: Array2::from_shape_vec((t, d), values).expect("length checked"),
    })
}

/// `(start seconds, end seconds, class)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance(pub f64, pub f64, pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedVideo {
    pub id: String,
    pub duration: f64,
    pub instances: Vec<Instance>,
}

impl AnnotatedVideo {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['.', '/', '\t', '\n']) {
            return Err(Error::InvalidValue(format!("invalid video id {:?}", self.id)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidValue(format!("video {}: duration {}", self.id, self.duration)));
        }
        for &Instance(s, e, c) in &self.instances {
            if !(0.0 <= s && s < e && e <= self.duration) || c >= num_classes {
                return Err(Error::InvalidValue(format!("video {}: bad instance ({s}, {e}, {c})", self.id)));
            }
        }
        Ok(())
    }

    /// Instances in normalized time.
    pub fn targets(&self) -> Vec<Target> {
        self.instances
            .iter()
            .map(|&Instance(s, e, c)| Target {
                interval: TemporalProposal::new(s / self.duration, e / self.duration),
                class: c,
            })
            .collect()
    }
}

pub fn write_annotations(videos: &[AnnotatedVideo], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for v in videos {
        serde_json::to_writer(&mut out, v).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedVideo>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut videos = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: AnnotatedVideo =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        videos.push(v);
    }
    Ok(videos)
}

/// A video with its annotation and both modalities, as loaded for training
/// and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub annotation: AnnotatedVideo,
    pub rgb: VideoFeatures,
    pub flow: VideoFeatures,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.annotation.id
    }

    pub fn modality(&self, m: Modality) -> &VideoFeatures {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let annotations = read_annotations(&dir.join(ANNOTATION_FILE))?;
        if annotations.is_empty() {
            return Err(Error::format(dir.join(ANNOTATION_FILE), "no videos"));
        }
        let mut videos = Vec::with_capacity(annotations.len());
        for annotation in annotations {
            annotation.validate(num_classes)?;
            let rgb = read_features(&feature_path(dir, &annotation.id, Modality::Rgb))?;
            let flow = read_features(&feature_path(dir, &annotation.id, Modality::Flow))?;
            if rgb.snippets.nrows() != flow.snippets.nrows() {
                return Err(Error::format(
                    feature_path(dir, &annotation.id, Modality::Flow),
                    format!("{} snippets, rgb has {}", flow.snippets.nrows(), rgb.snippets.nrows()),
                ));
            }
            videos.push(Video { annotation, rgb, flow });
        }
        Ok(Self { videos })
    }

    pub fn annotations(&self) -> Vec<AnnotatedVideo> {
        self.videos.iter().map(|v| v.annotation.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub snippets: usize,
    pub feat_dim: usize,
    pub classes: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Action length range in snippets.
    pub min_length: usize,
    pub max_length: usize,
    /// Norm of the per-class offset added inside action extents.
    pub signature_strength: f64,
    /// Standard deviation of the per-element background noise.
    pub noise: f64,
    /// Seconds covered by one snippet.
    pub snippet_seconds: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 16,
            snippets: 96,
            feat_dim: 16,
            classes: 4,
            min_actions: 1,
            max_actions: 3,
            min_length: 8,
            max_length: 28,
            signature_strength: 3.0,
            noise: 0.5,
            snippet_seconds: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_videos == 0 || self.snippets == 0 || self.feat_dim == 0 || self.classes == 0 {
            return bad("num_videos, snippets, feat_dim and classes must be positive");
        }
        if self.min_actions > self.max_actions || self.min_length == 0 || self.min_length > self.max_length {
            return bad("action count and length ranges must be non-empty");
        }
        // every action plus a one-snippet gap must fit
        if self.max_actions * (self.max_length + 1) > self.snippets {
            return bad("max_actions actions of max_length do not fit in the video");
        }
        if !(self.signature_strength >= 0.0 && self.noise >= 0.0 && self.snippet_seconds > 0.0) {
            return bad("strength and noise must be non-negative, snippet_seconds positive");
        }
        Ok(())
    }
}

/// Unit-norm class signatures for one modality.
fn signatures(spec: &SyntheticSpec, seed: u64, modality: Modality) -> Vec<Vec<f64>> {
    (0..spec.classes)
        .map(|c| {
            let mut rng = rng::stream2(seed, rng::domain::SYNTH_SIGNATURE, modality.code() as u64, c as u64);
            let v: Vec<f64> = (0..spec.feat_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Non-overlapping actions in snippet units `(start, end_exclusive, class)`.
fn layout<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<(usize, usize, usize)> {
    let count = rng.random_range(spec.min_actions..=spec.max_actions);
    let lengths: Vec<usize> = (0..count).map(|_| rng.random_range(spec.min_length..=spec.max_length)).collect();
    // distribute the free snippets over count + 1 gaps, at least one between actions
    let used: usize = lengths.iter().sum::<usize>() + count.saturating_sub(1);
    let mut free = spec.snippets - used;
    let mut gaps = vec![0usize; count + 1];
    for g in gaps.iter_mut().take(count) {
        let take = rng.random_range(0..=free);
        let take = take / 2;
        *g = take;
        free -= take;
    }
    gaps[count] = free;
    let mut out = Vec::with_capacity(count);
    let mut pos = 0;
    for (i, &len) in lengths.iter().enumerate() {
        pos += gaps[i] + usize::from(i > 0);
        out.push((pos, pos + len, rng.random_range(0..spec.classes)));
        pos += len;
    }
    out
}

fn features_for<R: Rng>(
    spec: &SyntheticSpec,
    sigs: &[Vec<f64>],
    actions: &[(usize, usize, usize)],
    strength: f64,
    rng: &mut R,
) -> Array2<f32> {
    let mut m = Array2::from_shape_fn((spec.snippets, spec.feat_dim), |_| {
        (spec.noise * rng.sample::<f64, _>(StandardNormal)) as f32
    });
    for &(s, e, c) in actions {
        for r in s..e {
            for (x, &w) in m.row_mut(r).iter_mut().zip(&sigs[c]) {
                *x += (strength * w) as f32;
            }
        }
    }
    m
}

/// Generates one video. Deterministic in `(spec, seed, index)`.
pub fn synthesize_video(spec: &SyntheticSpec, seed: u64, index: usize) -> Video {
    let mut rng = rng::stream(seed, rng::domain::SYNTH_VIDEO, index as u64);
    let actions = layout(spec, &mut rng);
    let id = format!("video_{index:04}");
    let mut features = Modality::ALL.iter().map(|&m| {
        let sigs = signatures(spec, seed, m);
        let mut frng = rng::stream2(seed, rng::domain::SYNTH_VIDEO, index as u64, 1 + m.code() as u64);
        VideoFeatures {
            id: id.clone(),
            modality: m,
            snippets: features_for(spec, &sigs, &actions, spec.signature_strength, &mut frng),
        }
    });
    let rgb = features.next().expect("rgb");
    let flow = features.next().expect("flow");
    let sec = spec.snippet_seconds;
    Video {
        annotation: AnnotatedVideo {
            id,
            duration: spec.snippets as f64 * sec,
            instances: actions.iter().map(|&(s, e, c)| Instance(s as f64 * sec, e as f64 * sec, c)).collect(),
        },
        rgb,
        flow,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let videos = parallel::map_range(spec.num_videos, |i| synthesize_video(spec, seed, i));
    Ok(Dataset { videos })
}

/// Writes a dataset directory. On failure the directory's new files are
/// removed.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let res = (|| {
        for v in &ds.videos {
            for m in Modality::ALL {
                let p = feature_path(dir, v.id(), m);
                written.push(p.clone());
                write_features(v.modality(m), &p)?;
            }
        }
        let p = dir.join(ANNOTATION_FILE);
        written.push(p.clone());
        write_annotations(&ds.annotations(), &p)
    })();
    if res.is_err() {
        for p in written {
            let _ = fs::remove_file(p);
        }
    }
    res
}

/// Writes `contents` to `path` through a temporary sibling so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().and_then(|e| e.to_str()).map(|e| format!("{e}.")).unwrap_or_default()
    ));
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(contents).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 6,
            snippets: 48,
            feat_dim: 8,
            max_length: 14,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn features_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = synthesize_video(&small(), 3, 0);
        let p = feature_path(dir.path(), v.id(), Modality::Flow);
        write_features(&v.flow, &p).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back, v.flow);
        assert_eq!(back.id, "video_0000");
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = synthesize_video(&small(), 3, 1);
        let p = dir.path().join("x.rgb.feat");
        write_features(&v.rgb, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Truncated { .. })));
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        let err = read_features(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("x.rgb.feat"));
    }

    #[test]
    fn generation_is_deterministic_and_within_range() {
        let spec = small();
        let a = generate_synthetic(&spec, 11).unwrap();
        let b = generate_synthetic(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 12).unwrap();
        assert_ne!(a, c);
        for v in &a.videos {
            v.annotation.validate(spec.classes).unwrap();
            let n = v.annotation.instances.len();
            assert!((1..=3).contains(&n));
            // sorted and non-overlapping
            for w in v.annotation.instances.windows(2) {
                assert!(w[0].1 < w[1].0);
            }
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small(), 4).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path(), 4).unwrap(), ds);
    }

    fn welch_t(a: &[f64], b: &[f64]) -> f64 {
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        let (ma, mb) = (mean(a), mean(b));
        (ma - mb) / (var(a, ma) / a.len() as f64 + var(b, mb) / b.len() as f64).sqrt()
    }

    /// Projection of each snippet on its video's first action signature,
    /// split by inside / outside the action extents.
    fn projections(spec: &SyntheticSpec, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let sigs = signatures(spec, seed, Modality::Rgb);
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for i in 0..spec.num_videos {
            let v = synthesize_video(spec, seed, i);
            let sec = spec.snippet_seconds;
            let class = v.annotation.instances[0].2;
            for r in 0..spec.snippets {
                let t = (r as f64 + 0.5) * sec;
                let hit = v.annotation.instances.iter().any(|&Instance(s, e, c)| c == class && s <= t && t < e);
                let p: f64 = v.rgb.snippets.row(r).iter().zip(&sigs[class]).map(|(&x, &w)| x as f64 * w).sum();
                if hit {
                    inside.push(p);
                } else {
                    outside.push(p);
                }
            }
        }
        (inside, outside)
    }

    #[test]
    fn signature_strength_controls_separability() {
        let spec = SyntheticSpec {
            num_videos: 40,
            ..small()
        };
        let (i, o) = projections(&spec, 5);
        assert!(welch_t(&i, &o) > 10.0);
        let flat = SyntheticSpec {
            signature_strength: 0.0,
            ..spec
        };
        let (i, o) = projections(&flat, 5);
        // two-sided test at about the 1% level does not reject
        assert!(welch_t(&i, &o).abs() < 2.6);
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        let tight = SyntheticSpec {
            snippets: 20,
            ..SyntheticSpec::default()
        };
        assert!(tight.validate().is_err());
    }
}
