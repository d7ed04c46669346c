use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{DatasetKind, DatasetSpec};
use super::pretrain::PretrainConfig;
use crate::error::{Error, Result};
use crate::metrics::EncoderConfig;
use crate::training::{Mode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub seed: u64,
    pub per_class: usize,
    pub identities: usize,
    pub identity_size: usize,
    pub identity_pool: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        DatasetSection {
            kind: DatasetKind::Shapes16,
            seed: 1,
            per_class: spec.per_class,
            identities: spec.identities,
            identity_size: spec.identity_size,
            identity_pool: spec.identity_pool,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            per_class: self.per_class,
            identities: self.identities,
            identity_size: self.identity_size,
            identity_pool: self.identity_pool,
        }
    }
}

/// Prompt used for the "without token" half of each KPS pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithoutToken {
    /// The trigger prompt with the trigger removed: the empty prompt.
    #[default]
    Null,
    /// The class the identity was seeded from.
    Class,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub modes: Vec<Mode>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Index of the identity concept used by single-concept runs.
    pub identity: usize,
    /// Number of concepts for multi-concept runs.
    pub concepts: usize,
    /// Training steps per concept in a multi-concept run.
    pub concept_steps: usize,
    /// Std of the noise added to a trigger's initial class embedding.
    pub trigger_noise: f64,
    /// Trigger-init noise for multi-concept runs. Concepts seeded from the
    /// same class need triggers far enough apart to tell them apart.
    pub concept_trigger_noise: f64,
    pub eval_samples: usize,
    /// Share initial noise between the with- and without-token generations.
    pub paired_seeds: bool,
    pub without_token: WithoutToken,
    pub sweep_steps: usize,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            modes: vec![Mode::Lora, Mode::Cat],
            alphas: vec![0.0, 0.1, 0.5, 1.0],
            seeds: vec![1, 2, 3],
            identity: 0,
            concepts: 3,
            concept_steps: 4000,
            trigger_noise: 0.1,
            concept_trigger_noise: 1.0,
            eval_samples: 10,
            paired_seeds: true,
            without_token: WithoutToken::Null,
            sweep_steps: 1000,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub pretrain: PretrainConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            pretrain: PretrainConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        if e.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("experiment.alphas must be finite and non-negative".into()));
        }
        if [e.trigger_noise, e.concept_trigger_noise].iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
            return Err(Error::Config("trigger noise must be finite and non-negative".into()));
        }
        if e.eval_samples == 0 || e.workers == 0 || e.sweep_steps == 0 || e.concept_steps == 0 {
            return Err(Error::Config(
                "eval_samples, workers, sweep_steps and concept_steps must be at least 1".into(),
            ));
        }
        if e.identity >= self.dataset.identities || e.concepts > self.dataset.identities {
            return Err(Error::Config(format!(
                "experiment asks for identity {} / {} concepts but the dataset has {}",
                e.identity, e.concepts, self.dataset.identities
            )));
        }
        Ok(())
    }

    /// Settings for the glyph dataset: [`Default`] plus x̂₀ clipping to the
    /// `[-1, 1]` pixel range during sampling.
    pub fn shapes16() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.pretrain.schedule.clip_x0 = Some(1.0);
        cfg
    }
}
