//! Scripted sweeps over sampling and training options at desk scale.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::DEFAULT_SIGNAL_SCALE;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::THUMOS_GRID;
use crate::model::DenoiserModel;
use crate::pipeline::{sample_and_score, train_model};
use crate::sampler::SampleConfig;
use crate::train::Fusion;

/// Score threshold below which the renewal design replaces a proposal.
pub const RENEWAL_THRESHOLD: f64 = 0.3;
pub const SIGNAL_SCALES: [f64; 4] = [0.1, DEFAULT_SIGNAL_SCALE, 1.0, 2.0];
pub const PROPOSAL_GRID: [usize; 4] = [10, 30, 50, 100];
pub const STEP_GRID: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// How queries are refined between steps.
    Refinement,
    /// Iterative denoising and selective conditioning on/off.
    Decomposition,
    /// Retrains at each signal scale.
    SignalScale,
    ProposalsSteps,
    /// Retrains per modality and fusion mode.
    Fusion,
    Nms,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Refinement => "refinement",
            Study::Decomposition => "decomposition",
            Study::SignalScale => "signal-scale",
            Study::ProposalsSteps => "proposals-steps",
            Study::Fusion => "fusion",
            Study::Nms => "nms",
        }
    }

    /// Whether every row needs its own trained model.
    pub fn retrains(self) -> bool {
        matches!(self, Study::SignalScale | Study::Fusion)
    }
}

/// Rows of labelled scores; every row has one value per column.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub study: Study,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AblationTable {
    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row).map(|(_, v)| v[c])
    }

    /// Tab-separated, header row first.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}\t{}", self.study.name(), self.columns.join("\t"));
        for (label, values) in &self.rows {
            let cells: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "{label}\t{}", cells.join("\t"));
        }
        s
    }
}

fn threshold_columns() -> Vec<String> {
    THUMOS_GRID.iter().map(|t| format!("map@{t:.1}")).chain(["average".to_string()]).collect()
}

/// Per-threshold mAP and average mAP, each averaged over `seeds`.
fn scores(model: &DenoiserModel, cfg: &RunConfig, opts: &SampleConfig, data: &Dataset, seeds: &[u64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; THUMOS_GRID.len() + 1];
    for &seed in seeds {
        let r = sample_and_score(model, cfg, opts, data, seed, &THUMOS_GRID)?;
        for (a, v) in acc.iter_mut().zip(r.map.map.iter().chain([&r.map.average_map])) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / seeds.len() as f64).collect())
}

fn average(model: &DenoiserModel, cfg: &RunConfig, opts: &SampleConfig, data: &Dataset, seeds: &[u64]) -> Result<f64> {
    Ok(*scores(model, cfg, opts, data, seeds)?.last().expect("average column"))
}

/// The four iterative-denoising / selective-conditioning combinations.
pub fn decomposition_variants(base: &SampleConfig) -> Vec<(String, SampleConfig)> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(id, sc)| {
            let label = format!("id={}/sc={}", if id { "on" } else { "off" }, if sc { "on" } else { "off" });
            (label, SampleConfig { iterative: id, selective: sc, ..base.clone() })
        })
        .collect()
}

/// Runs one study. Inference-only studies use `model` when given and train
/// one from `cfg` otherwise; retraining studies always train. Scores are
/// averaged over `seeds` sampling seeds.
pub fn run_study(study: Study, cfg: &RunConfig, data: &Dataset, model: Option<&DenoiserModel>, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one sampling seed".into()));
    }
    let base = &cfg.sample;
    let trained;
    let model = match (study.retrains(), model) {
        (true, _) => None,
        (false, Some(m)) => Some(m),
        (false, None) => {
            trained = train_model(cfg, data, |_, _| Ok(()))?.0;
            Some(&trained)
        }
    };
    let table = match study {
        Study::Refinement => {
            let plain = SampleConfig {
                selective: false,
                self_condition: false,
                renewal: None,
                ..base.clone()
            };
            let variants = [
                ("none", plain.clone()),
                ("self-condition", SampleConfig { self_condition: true, ..plain.clone() }),
                ("renewal", SampleConfig { renewal: Some(RENEWAL_THRESHOLD), ..plain.clone() }),
                ("selective", SampleConfig { selective: true, ..plain.clone() }),
                ("selective+self-condition", SampleConfig { selective: true, self_condition: true, ..plain }),
            ];
            let m = model.expect("inference study");
            let rows = variants
                .into_iter()
                .map(|(l, o)| Ok((l.to_string(), scores(m, cfg, &o, data, seeds)?)))
                .collect::<Result<_>>()?;
            AblationTable { study, columns: threshold_columns(), rows }
        }
        Study::Decomposition => {
            let m = model.expect("inference study");
            let rows = decomposition_variants(base)
                .into_iter()
                .map(|(l, o)| {
                    let vals = STEP_GRID
                        .iter()
                        .map(|&steps| average(m, cfg, &SampleConfig { steps, ..o.clone() }, data, seeds))
                        .collect::<Result<_>>()?;
                    Ok((l, vals))
                })
                .collect::<Result<_>>()?;
            AblationTable {
                study,
                columns: STEP_GRID.iter().map(|s| format!("steps={s}")).collect(),
                rows,
            }
        }
        Study::ProposalsSteps => {
            let m = model.expect("inference study");
            let rows = PROPOSAL_GRID
                .iter()
                .map(|&proposals| {
                    let vals = STEP_GRID
                        .iter()
                        .map(|&steps| average(m, cfg, &SampleConfig { steps, proposals, ..base.clone() }, data, seeds))
                        .collect::<Result<_>>()?;
                    Ok((format!("proposals={proposals}"), vals))
                })
                .collect::<Result<_>>()?;
            AblationTable {
                study,
                columns: STEP_GRID.iter().map(|s| format!("steps={s}")).collect(),
                rows,
            }
        }
        Study::Nms => {
            let m = model.expect("inference study");
            let rows = vec![
                ("off".to_string(), scores(m, cfg, &SampleConfig { nms: None, ..base.clone() }, data, seeds)?),
                ("nms@0.5".to_string(), scores(m, cfg, &SampleConfig { nms: Some(0.5), ..base.clone() }, data, seeds)?),
            ];
            AblationTable { study, columns: threshold_columns(), rows }
        }
        Study::SignalScale => {
            let rows = SIGNAL_SCALES
                .iter()
                .map(|&scale| {
                    let mut c = cfg.clone();
                    c.diffusion.scale = scale;
                    let (m, _) = train_model(&c, data, |_, _| Ok(()))?;
                    Ok((format!("scale={scale}"), scores(&m, &c, base, data, seeds)?))
                })
                .collect::<Result<_>>()?;
            AblationTable { study, columns: threshold_columns(), rows }
        }
        Study::Fusion => {
            let modality_dim = data.videos.first().map_or(0, |v| v.rgb.snippets.ncols());
            let rows = [Fusion::Rgb, Fusion::Flow, Fusion::Early, Fusion::Late]
                .into_iter()
                .map(|fusion| {
                    let mut c = cfg.clone();
                    c.data.fusion = fusion;
                    c.fit_model_to_data(modality_dim, cfg.model.num_classes);
                    let (m, _) = train_model(&c, data, |_, _| Ok(()))?;
                    let label = serde_json::to_value(fusion).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                    Ok((label, scores(&m, &c, base, data, seeds)?))
                })
                .collect::<Result<_>>()?;
            AblationTable { study, columns: threshold_columns(), rows }
        }
    };
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::default();
        cfg.synth = SyntheticSpec {
            num_videos: 2,
            snippets: 24,
            feat_dim: 4,
            min_length: 3,
            max_length: 6,
            ..SyntheticSpec::default()
        };
        cfg.model.model_dim = 8;
        cfg.model.decoder_layers = 1;
        cfg.model.scales = 2;
        cfg.fit_model_to_data(4, cfg.synth.classes);
        cfg.train.steps = 2;
        cfg.train.batch = 2;
        cfg.sample.proposals = 6;
        let data = generate_synthetic(&cfg.synth, 0).unwrap();
        (cfg, data)
    }

    #[test]
    fn decomposition_covers_four_flag_combinations() {
        let v = decomposition_variants(&SampleConfig::default());
        let flags: Vec<_> = v.iter().map(|(_, o)| (o.iterative, o.selective)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true), (true, true)]);
    }

    #[test]
    fn tables_have_one_value_per_column() {
        let (cfg, data) = tiny();
        for study in [Study::Nms, Study::Decomposition, Study::Fusion] {
            let t = run_study(study, &cfg, &data, None, &[0]).unwrap();
            assert!(!t.rows.is_empty());
            for (_, v) in &t.rows {
                assert_eq!(v.len(), t.columns.len());
                assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            }
            assert_eq!(t.to_tsv().lines().count(), t.rows.len() + 1);
        }
        assert!(run_study(Study::Nms, &cfg, &data, None, &[]).is_err());
    }
}
