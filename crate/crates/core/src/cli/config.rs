//! Sectioned `key = value` run configuration (TOML). Unknown keys are
//! rejected; omitted keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::TrainConfig;
use crate::model::{ModelConfig, Wiring};
use crate::nursing::{NursingConfig, REFERENCE_STEPS};
use crate::scenes::PromptKind;
use crate::schedules::{Family, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub n_head: usize,
    pub blocks: usize,
    pub time_freqs: usize,
    pub wiring: Wiring,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d: m.d,
            n_head: m.n_head,
            blocks: m.blocks,
            time_freqs: m.time_freqs,
            wiring: m.wiring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_drop: f64,
    pub seed: u64,
    pub scenes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            cond_drop: t.cond_drop,
            seed: t.seed,
            scenes: t.scenes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Prompt kinds, each evaluated as its own dataset.
    pub kinds: Vec<PromptKind>,
    /// Kinds whose prompts make up the training scenes.
    pub train_kinds: Vec<PromptKind>,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_seeds: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kinds: vec![PromptKind::Two],
            train_kinds: vec![PromptKind::Two],
            n_validation: 10,
            n_test: 300,
            n_seeds: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub cfg_scale: f64,
    pub capture_x0hat: bool,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            cfg_scale: 7.5,
            capture_x0hat: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Candidate IterRef steps; empty means the family default.
    pub candidate_steps: Vec<usize>,
    /// Datasets left out of the accumulated score.
    pub exclude: Vec<String>,
    /// Keep the `[nursing]` guidance settings during the sweep.
    pub with_guidance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out: PathBuf,
    pub workers: usize,
    /// Checkpoint path; relative paths resolve against `out`.
    pub checkpoint: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            workers: 1,
            checkpoint: PathBuf::from("train/model.gsnl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub sampler: SamplerSection,
    pub nursing: NursingConfig,
    pub sweep: SweepSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::diffusion(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            sampler: SamplerSection::default(),
            nursing: NursingConfig::ours(),
            sweep: SweepSection::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.model_config().validate()?;
        self.nursing.validate(self.schedule.sampling_steps)?;
        if self.data.kinds.is_empty() || self.data.train_kinds.is_empty() {
            return Err(Error::Config(
                "data.kinds and data.train_kinds must be non-empty".into(),
            ));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        if let Some(&s) = self
            .candidate_steps()
            .iter()
            .find(|&&s| s >= self.schedule.sampling_steps)
        {
            return Err(Error::Config(format!(
                "candidate step {s} outside 0..{}",
                self.schedule.sampling_steps
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            n_head: self.model.n_head,
            blocks: self.model.blocks,
            time_freqs: self.model.time_freqs,
            wiring: self.model.wiring,
            prediction: self.schedule.family.prediction_kind(),
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            objective: self.schedule.family.prediction_kind(),
            cond_drop: self.train.cond_drop,
            seed: self.train.seed,
            scenes: self.train.scenes,
        }
    }

    /// Explicit candidates, or every second step over the first half of a
    /// 50-step trajectory, or the first five steps of a 28-step flow run.
    pub fn candidate_steps(&self) -> Vec<usize> {
        if !self.sweep.candidate_steps.is_empty() {
            return self.sweep.candidate_steps.clone();
        }
        default_candidates(self.schedule.family, self.schedule.sampling_steps)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.run.checkpoint.is_absolute() {
            self.run.checkpoint.clone()
        } else {
            self.run.out.join(&self.run.checkpoint)
        }
    }
}

pub fn default_candidates(family: Family, sampling_steps: usize) -> Vec<usize> {
    match family {
        Family::Flow if sampling_steps < REFERENCE_STEPS => (0..5.min(sampling_steps)).collect(),
        _ => (0..sampling_steps / 2).step_by(2).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("[train]\nepoch = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[nope]\n"),
            Err(Error::Config(_))
        ));
        let cfg = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn candidate_defaults() {
        assert_eq!(
            default_candidates(Family::Diffusion, 50),
            (0..25).step_by(2).collect::<Vec<_>>()
        );
        assert_eq!(default_candidates(Family::Flow, 28), vec![0, 1, 2, 3, 4]);
        let cfg = RunConfig::parse("[sweep]\ncandidate_steps = [50]\n");
        assert!(cfg.is_err());
    }

    #[test]
    fn relative_checkpoints_live_under_the_output() {
        let mut cfg = RunConfig::default();
        cfg.run.out = PathBuf::from("/tmp/x");
        assert_eq!(
            cfg.checkpoint_path(),
            PathBuf::from("/tmp/x/train/model.gsnl")
        );
        cfg.run.checkpoint = PathBuf::from("/abs/m.gsnl");
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("/abs/m.gsnl"));
    }
}
