use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::BlockSpec;
use crate::conditions::AudioSynthConfig;
use crate::diffusion::{SampleOptions, ScheduleConfig};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BEAT_SIGMA;
use crate::numerics::hash::fnv1a64;
use crate::train::TrainOptions;

/// Longest clip any command accepts, in frames.
pub const MAX_FRAMES: usize = 196;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Main,
    Control,
    SingleBranchFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub sequences: usize,
    pub frames: usize,
    /// Texts; each names its motion style by keyword (walk, wave, jump,
    /// dance).
    pub labels: Vec<String>,
    pub bpms: Vec<f64>,
    pub audio: AudioSynthConfig,
    /// Fraction of control-stage examples tagged as music; the rest are
    /// speech.
    pub music_ratio: f64,
    /// Train the control stage on beat-locked clips only.
    pub control_beat_locked_only: bool,
    /// Seed of the text embedder.
    pub text_seed: u64,
    pub context_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sequences: 8,
            frames: 60,
            labels: vec!["a person walks forward".into(), "a person dances to the beat".into()],
            bpms: vec![90.0, 120.0, 150.0],
            audio: AudioSynthConfig::default(),
            music_ratio: 1.0,
            control_beat_locked_only: true,
            text_seed: 11,
            context_width: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples per distinct text for multimodality.
    pub samples_per_text: usize,
    pub diversity_pairs: usize,
    pub multimodality_pairs: usize,
    pub retrieval_pool: usize,
    pub beat_window: usize,
    pub beat_sigma: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_text: 10,
            diversity_pairs: 300,
            multimodality_pairs: 20,
            retrieval_pool: 32,
            beat_window: 3,
            beat_sigma: DEFAULT_BEAT_SIGMA,
            seed: 1,
        }
    }
}

/// One experiment, read from a single TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stage: Stage,
    /// Optional skeleton TOML; the built-in 22-joint skeleton otherwise.
    pub skeleton: Option<PathBuf>,
    pub model: BlockSpec,
    pub schedule: ScheduleConfig,
    pub sampling: SampleOptions,
    pub data: DataConfig,
    pub train_main: TrainOptions,
    pub train_control: TrainOptions,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            stage: Stage::Main,
            skeleton: None,
            model: BlockSpec::default(),
            schedule: ScheduleConfig::default(),
            sampling: SampleOptions::default(),
            data: DataConfig::default(),
            train_main: TrainOptions::default(),
            train_control: TrainOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// FNV-1a of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.context_width != self.data.context_width {
            return Err(Error::Config(format!(
                "model.context_width {} differs from data.context_width {}",
                self.model.context_width, self.data.context_width
            )));
        }
        let d = &self.data;
        if d.frames < 2 || d.frames > MAX_FRAMES {
            return Err(Error::Config(format!("data.frames must lie in 2..={MAX_FRAMES}, got {}", d.frames)));
        }
        let mut distinct = d.labels.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < 2 || distinct.len() != d.labels.len() {
            return Err(Error::Config("data.labels needs at least 2 distinct texts".into()));
        }
        if d.labels.iter().any(|l| crate::conditions::tokenize(l).is_empty()) {
            return Err(Error::Config("every label needs at least one word".into()));
        }
        if d.sequences < d.labels.len() {
            return Err(Error::Config("need at least one sequence per label".into()));
        }
        if d.bpms.is_empty() || d.bpms.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("data.bpms must be positive and non-empty".into()));
        }
        if !(0.0..=1.0).contains(&d.music_ratio) {
            return Err(Error::Config("data.music_ratio must lie in [0, 1]".into()));
        }
        if d.audio.channels == 0 || d.audio.fps < crate::motion::FPS {
            return Err(Error::Config("audio needs channels and an fps of at least 20".into()));
        }
        crate::diffusion::DiffusionSchedule::from_config(&self.schedule).map_err(|e| Error::Config(e.to_string()))?;
        if self.sampling.guidance != 1.0 {
            return Err(Error::Config("sampling.guidance must be 1.0".into()));
        }
        for (name, t) in [("train_main", &self.train_main), ("train_control", &self.train_control)] {
            if t.batch_size == 0 || !(t.adam.lr > 0.0) {
                return Err(Error::Config(format!("{name} needs a positive batch size and learning rate")));
            }
        }
        let e = &self.eval;
        if e.beat_window.is_multiple_of(2) || !(e.beat_sigma > 0.0) {
            return Err(Error::Config("eval.beat_window must be odd and beat_sigma positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.model.order.to_string(), "CS/F/T/CA/F");
        assert_eq!(c.schedule.steps, 1000);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = ExperimentConfig::from_toml("seed = 4\n[model]\norder = \"T/CA/F\"\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.order.to_string(), "T/CA/F");
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_invalid() {
        assert!(ExperimentConfig::from_toml("[model]\norder = \"T/X\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nframes = 197\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nlabels = [\"walk\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nlabels = [\"walk\", \"walk\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("[schedule]\nbeta_end = 2.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nheads = 5\n").is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = [").is_err());
    }
}
