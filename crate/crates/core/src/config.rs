//! Run configuration: one TOML file with a section per stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::DEFAULT_SIGNAL_SCALE;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SampleConfig;
use crate::schedule::{NoiseSchedule, DEFAULT_OFFSET, DEFAULT_STEPS};
use crate::train::{Fusion, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub total_steps: usize,
    pub offset: f64,
    pub scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_STEPS,
            offset: DEFAULT_OFFSET,
            scale: DEFAULT_SIGNAL_SCALE,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.total_steps, self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub fusion: Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SyntheticSpec,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let data = DataConfig::default();
        let model = ModelConfig {
            feat_dim: data.fusion.feat_dim(synth.feat_dim),
            num_classes: synth.classes,
            streams: data.fusion.streams(),
            ..ModelConfig::default()
        };
        Self {
            seed: 0,
            synth,
            data,
            diffusion: DiffusionConfig::default(),
            model,
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.synth.validate()?;
        self.diffusion.schedule()?;
        if !(self.diffusion.scale > 0.0 && self.diffusion.scale.is_finite()) {
            return Err(Error::Config(format!("diffusion.scale {} must be positive", self.diffusion.scale)));
        }
        if self.model.streams != self.data.fusion.streams() {
            return Err(Error::Config(format!(
                "model.streams {:?} do not match fusion {:?}",
                self.model.streams, self.data.fusion
            )));
        }
        Ok(())
    }

    /// Makes the model section consistent with the fusion mode and a
    /// dataset's feature width and class count.
    pub fn fit_model_to_data(&mut self, modality_dim: usize, classes: usize) {
        self.model.feat_dim = self.data.fusion.feat_dim(modality_dim);
        self.model.num_classes = classes;
        self.model.streams = self.data.fusion.streams();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert!(text.contains("[train]"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[sample]\ngamma = 2.0\n").is_err());
        let partial = RunConfig::from_toml("seed = 9\n[sample]\nsteps = 5\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.sample.steps, 5);
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn fusion_must_match_streams() {
        let mut c = RunConfig::default();
        c.data.fusion = Fusion::Late;
        assert!(c.validate().is_err());
        c.fit_model_to_data(16, 4);
        c.validate().unwrap();
        assert_eq!(c.model.feat_dim, 16);
    }
}
