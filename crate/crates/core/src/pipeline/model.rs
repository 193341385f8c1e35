use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Normalizer;
use crate::attention::{BlockSpec, Mwnet};
use crate::conditions::AudioFeatures;
use crate::control::{main_only_predict, DualBranchModel, DualPredictor, MainPredictor, SingleBranchModel, SinglePredictor};
use crate::diffusion::{sample, DiffusionSchedule, Predictor, SampleOptions, ScheduleConfig};
use crate::error::{Error, Result};
use crate::motion::{MotionSeq, FEATURE_WIDTH, FPS};
use crate::numerics::{Checkpoint, SplitMix64, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Main,
    Dual,
    Single,
}

/// Everything besides the weights needed to use a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub spec: BlockSpec,
    pub schedule: ScheduleConfig,
    pub normalizer: Normalizer,
    pub text_seed: u64,
    /// Audio channels the model expects; 0 for text-only models.
    pub audio_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Main(Mwnet),
    Dual(DualBranchModel<Mwnet>),
    Single(SingleBranchModel),
}

/// A loaded model with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    pub model: Model,
    pub config_hash: u64,
    pub seed: u64,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = match &self.model {
            Model::Main(m) => m.params.clone(),
            Model::Dual(d) => d.all_params(),
            Model::Single(s) => s.all_params(),
        };
        Checkpoint {
            config_hash: self.config_hash,
            seed: self.seed,
            meta: serde_json::to_string(&self.meta).expect("meta serialises"),
            params,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
        meta.spec.validate().map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        if meta.normalizer.mean.len() != FEATURE_WIDTH || meta.normalizer.std.len() != FEATURE_WIDTH {
            return Err(Error::Format("checkpoint normalizer has the wrong width".into()));
        }
        let bad = |e: Error| Error::Format(format!("checkpoint parameters: {e}"));
        let model = match meta.kind {
            ModelKind::Main => Model::Main(Mwnet::from_params(meta.spec.clone(), ck.params).map_err(bad)?),
            ModelKind::Dual => {
                let d = DualBranchModel::from_params(meta.spec.clone(), &ck.params).map_err(bad)?;
                if d.audio_width() != meta.audio_width {
                    return Err(Error::Format("checkpoint audio width disagrees with its projector".into()));
                }
                Model::Dual(d)
            }
            ModelKind::Single => Model::Single(SingleBranchModel::from_params(meta.spec.clone(), &ck.params).map_err(bad)?),
        };
        Ok(TrainedModel {
            meta,
            model,
            config_hash: ck.config_hash,
            seed: ck.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::from_config(&self.meta.schedule)
    }

    /// The text-only branch: the main branch of a dual model, or the
    /// (possibly finetuned) network of a single-branch model.
    pub fn text_branch(&self) -> &Mwnet {
        match &self.model {
            Model::Main(m) => m,
            Model::Dual(d) => &d.main,
            Model::Single(s) => &s.main,
        }
    }

    /// Text embedding for this model.
    pub fn context(&self, text: &str) -> Result<Tensor> {
        Ok(crate::conditions::embed_text(text, self.meta.spec.context_width, self.meta.text_seed)?.embedding)
    }

    /// Audio length-matched to `frames` at 20 FPS, checked against the
    /// model's audio width.
    pub fn prepare_audio(&self, audio: &AudioFeatures, frames: usize) -> Result<Tensor> {
        if self.meta.kind == ModelKind::Main {
            return Err(Error::invalid("a main-branch checkpoint has no audio input"));
        }
        if audio.channels() != self.meta.audio_width {
            return Err(Error::shape("audio channels", audio.features.shape(), &[audio.frames(), self.meta.audio_width]));
        }
        let a = if audio.fps != FPS { audio.downsample(FPS)? } else { audio.clone() };
        Ok(a.fit_length(frames)?.features)
    }

    /// One sample in model space. Without audio only the text branch runs.
    pub fn sample_normalized(
        &self,
        context: &Tensor,
        audio: Option<&Tensor>,
        frames: usize,
        seed: u64,
        opts: &SampleOptions,
    ) -> Result<Tensor> {
        let sched = self.schedule()?;
        let run = |p: &dyn Predictor| sample(p, frames, FEATURE_WIDTH, &sched, &mut SplitMix64::new(seed), opts);
        match (&self.model, audio) {
            (Model::Dual(d), Some(a)) => run(&DualPredictor {
                model: d,
                context: context.clone(),
                audio: Some(a.clone()),
            }),
            (Model::Single(s), a) => run(&SinglePredictor {
                model: s,
                context: context.clone(),
                audio: a.cloned(),
            }),
            (Model::Main(_), Some(_)) => Err(Error::invalid("a main-branch checkpoint has no audio input")),
            _ => run(&MainPredictor {
                model: self.text_branch(),
                context: context.clone(),
            }),
        }
    }

    /// One sample decoded back to raw features.
    pub fn sample_motion(
        &self,
        text: &str,
        audio: Option<&AudioFeatures>,
        frames: usize,
        seed: u64,
        opts: &SampleOptions,
    ) -> Result<MotionSeq> {
        let context = self.context(text)?;
        let audio = audio.map(|a| self.prepare_audio(a, frames)).transpose()?;
        let z = self.sample_normalized(&context, audio.as_ref(), frames, seed, opts)?;
        MotionSeq::new(FPS, self.meta.normalizer.denormalize(&z)?)
    }

    /// Text-branch prediction, used to compare outputs across stages.
    pub fn text_only_predict(&self, x_t: &Tensor, t: usize, context: &Tensor) -> Result<Tensor> {
        main_only_predict(self.text_branch(), x_t, t, context)
    }
}
