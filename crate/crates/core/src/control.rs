//! Dual-branch control: a frozen main branch, a trainable clone of it fed
//! with audio, and zero-initialised bridges carrying each control block's
//! output into the input of the matching main block.

use crate::attention::{linear, BranchModel, Mwnet};
use crate::diffusion::{DiffusionSchedule, Predictor};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamStore, SplitMix64, Tensor, Var};
use crate::par::Parallelism;
use crate::train::{train, Example, TrainOptions};

pub const MAIN_PREFIX: &str = "main";
pub const CONTROL_PREFIX: &str = "control";
pub const BRIDGE_PREFIX: &str = "bridge";
pub const AUDIO_PREFIX: &str = "audio_proj";

/// Deep copy of the main branch. Parameter storage is copy-on-write, so
/// later updates to either side never reach the other.
pub fn clone_branch<M: BranchModel + Clone>(main: &M) -> M {
    main.clone()
}

/// Zero weights and biases for one `C → C` bridge per block.
pub fn zero_bridges(blocks: usize, width: usize) -> ParamStore {
    let mut p = ParamStore::new();
    for i in 0..blocks {
        p.init_zeros(&format!("{i}.w"), &[width, width]);
        p.init_zeros(&format!("{i}.b"), &[1, width]);
    }
    p
}

/// `C_a → C` audio projector.
pub fn audio_projector(audio_width: usize, width: usize, std: f64, rng: &mut SplitMix64) -> ParamStore {
    let mut p = ParamStore::new();
    p.init_normal("w", &[audio_width, width], std, rng);
    p.init_zeros("b", &[1, width]);
    p
}

/// `latent + audio · W + b`, or `latent` when there is no audio.
pub fn inject_audio(g: &Graph, proj: &Bound, latent: Var, audio: Option<Var>) -> Result<Var> {
    let Some(a) = audio else {
        return Ok(latent);
    };
    let (ls, as_) = (g.shape(latent), g.shape(a));
    if ls.len() != 2 || as_.len() != 2 || ls[0] != as_[0] {
        return Err(Error::shape("inject_audio", &ls, &as_));
    }
    g.add(latent, linear(g, a, proj.var("w"), Some(proj.var("b")))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel<M = Mwnet> {
    pub main: M,
    pub control: M,
    /// `{i}.w`, `{i}.b` per block.
    pub bridges: ParamStore,
    pub audio_proj: ParamStore,
}

/// Graph handles for every part of a [`DualBranchModel`].
pub struct DualBound {
    pub main: Bound,
    pub control: Bound,
    pub bridges: Bound,
    pub audio_proj: Bound,
}

impl<M: BranchModel + Clone> DualBranchModel<M> {
    /// Clones `main` into a control branch and attaches zero bridges.
    pub fn new(main: M, audio_width: usize, rng: &mut SplitMix64) -> Self {
        let control = clone_branch(&main);
        let width = main.spec().width;
        let bridges = zero_bridges(main.block_count(), width);
        let audio_proj = audio_projector(audio_width, width, 1.0 / (audio_width as f64).sqrt(), rng);
        DualBranchModel {
            main,
            control,
            bridges,
            audio_proj,
        }
    }

    pub fn audio_width(&self) -> usize {
        self.audio_proj.get("w").map_or(0, |w| w.rows())
    }

    /// Checks the structural mirror and bridge count.
    pub fn validate(&self) -> Result<()> {
        self.main.params().check_compatible(self.control.params())?;
        if self.main.block_count() != self.control.block_count() {
            return Err(Error::Contract("branch block counts differ".into()));
        }
        zero_bridges(self.main.block_count(), self.main.spec().width).check_compatible(&self.bridges)?;
        let w = self
            .audio_proj
            .get("w")
            .ok_or_else(|| Error::Format("missing audio projector".into()))?;
        let mut expect = ParamStore::new();
        expect.init_zeros("w", &[w.rows(), self.main.spec().width]);
        expect.init_zeros("b", &[1, self.main.spec().width]);
        expect.check_compatible(&self.audio_proj)
    }

    pub fn bridges_are_zero(&self) -> bool {
        self.bridges.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    /// Frobenius norm over every bridge parameter.
    pub fn bridge_norm(&self) -> f64 {
        self.bridges.iter().map(|(_, t)| t.norm().powi(2)).sum::<f64>().sqrt()
    }

    /// Main branch constant; the rest tracked when `trainable`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> DualBound {
        DualBound {
            main: self.main.params().bind(g, false),
            control: self.control.params().bind(g, trainable),
            bridges: self.bridges.bind(g, trainable),
            audio_proj: self.audio_proj.bind(g, trainable),
        }
    }

    /// Parameters trained in the control stage, under their prefixes.
    pub fn trainable_params(&self) -> ParamStore {
        let mut p = self.control.params().prefixed(CONTROL_PREFIX);
        p.extend(self.bridges.prefixed(BRIDGE_PREFIX));
        p.extend(self.audio_proj.prefixed(AUDIO_PREFIX));
        p
    }

    /// Every parameter under its checkpoint prefix.
    pub fn all_params(&self) -> ParamStore {
        let mut p = self.main.params().prefixed(MAIN_PREFIX);
        p.extend(self.trainable_params());
        p
    }
}

impl DualBranchModel<Mwnet> {
    /// Inverse of [`DualBranchModel::all_params`].
    pub fn from_params(spec: crate::attention::BlockSpec, params: &ParamStore) -> Result<Self> {
        let main = Mwnet::from_params(spec.clone(), params.strip_prefix(MAIN_PREFIX))?;
        let control = Mwnet::from_params(spec, params.strip_prefix(CONTROL_PREFIX))?;
        let m = DualBranchModel {
            main,
            control,
            bridges: params.strip_prefix(BRIDGE_PREFIX),
            audio_proj: params.strip_prefix(AUDIO_PREFIX),
        };
        m.validate()?;
        Ok(m)
    }

    fn set_trainable(&mut self, p: &ParamStore) {
        self.control.params = p.strip_prefix(CONTROL_PREFIX);
        self.bridges = p.strip_prefix(BRIDGE_PREFIX);
        self.audio_proj = p.strip_prefix(AUDIO_PREFIX);
    }
}

/// Prediction through both branches. Text context feeds both; audio only
/// the control branch.
pub fn dual_forward<M: BranchModel + Clone>(
    g: &Graph,
    model: &DualBranchModel<M>,
    b: &DualBound,
    x_t: Var,
    t: usize,
    context: Var,
    audio: Option<Var>,
) -> Result<Var> {
    let eps_main = model.main.time_embedding(g, &b.main, t)?;
    let eps_ctrl = model.control.time_embedding(g, &b.control, t)?;
    let mut h_main = model.main.embed(g, &b.main, x_t)?;
    let mut h_ctrl = model.control.embed(g, &b.control, x_t)?;
    h_ctrl = inject_audio(g, &b.audio_proj, h_ctrl, audio)?;
    for i in 0..model.main.block_count() {
        h_ctrl = model.control.block(g, &b.control, i, h_ctrl, eps_ctrl, context)?;
        let w = b.bridges.var(&format!("{i}.w"));
        let bias = b.bridges.var(&format!("{i}.b"));
        let offset = linear(g, h_ctrl, w, Some(bias))?;
        h_main = model.main.block(g, &b.main, i, g.add(h_main, offset)?, eps_main, context)?;
    }
    model.main.readout(g, &b.main, h_main)
}

/// Main branch only, all parameters constant.
pub fn main_only_predict<M: BranchModel>(main: &M, x_t: &Tensor, t: usize, context: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let b = main.params().bind(&g, false);
    let y = main.forward(&g, &b, g.constant(x_t.clone()), t, g.constant(context.clone()))?;
    Ok(g.value(y))
}

pub fn dual_predict<M: BranchModel + Clone>(
    model: &DualBranchModel<M>,
    x_t: &Tensor,
    t: usize,
    context: &Tensor,
    audio: Option<&Tensor>,
) -> Result<Tensor> {
    let g = Graph::new();
    let b = model.bind(&g, false);
    let a = audio.map(|a| g.constant(a.clone()));
    let y = dual_forward(&g, model, &b, g.constant(x_t.clone()), t, g.constant(context.clone()), a)?;
    Ok(g.value(y))
}

/// Sampling through the main branch alone.
pub struct MainPredictor<'a, M> {
    pub model: &'a M,
    pub context: Tensor,
}

impl<M: BranchModel + Sync> Predictor for MainPredictor<'_, M> {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        main_only_predict(self.model, x_t, t, &self.context)
    }
}

/// Sampling through both branches.
pub struct DualPredictor<'a, M> {
    pub model: &'a DualBranchModel<M>,
    pub context: Tensor,
    pub audio: Option<Tensor>,
}

impl<M: BranchModel + Clone + Sync> Predictor for DualPredictor<'_, M> {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        dual_predict(self.model, x_t, t, &self.context, self.audio.as_ref())
    }
}

/// Trains control branch, bridges and audio projector with the main branch
/// held constant. Returns the per-step losses.
pub fn train_control_stage(
    model: &mut DualBranchModel<Mwnet>,
    examples: &[Example],
    sched: &DiffusionSchedule,
    opts: &TrainOptions,
    par: Parallelism,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("control stage needs at least one example"));
    }
    let mut trainable = model.trainable_params();
    let frozen = &*model;
    let losses = train(&mut trainable, examples, sched, opts, par, |g, tb, ex, x_t, t| {
        let b = DualBound {
            main: frozen.main.params.bind(g, false),
            control: tb.strip_prefix(CONTROL_PREFIX),
            bridges: tb.strip_prefix(BRIDGE_PREFIX),
            audio_proj: tb.strip_prefix(AUDIO_PREFIX),
        };
        let audio = ex.audio.as_ref().map(|a| g.constant(a.clone()));
        dual_forward(g, frozen, &b, x_t, t, g.constant(ex.context.clone()), audio)
    })?;
    model.set_trainable(&trainable);
    Ok(losses)
}

/// Single-branch baseline: the main branch itself is trained, with audio
/// projected and added to its input latent.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleBranchModel {
    pub main: Mwnet,
    pub audio_proj: ParamStore,
}

impl SingleBranchModel {
    pub fn new(main: Mwnet, audio_width: usize, rng: &mut SplitMix64) -> Self {
        let width = main.spec.width;
        let audio_proj = audio_projector(audio_width, width, 1.0 / (audio_width as f64).sqrt(), rng);
        SingleBranchModel { main, audio_proj }
    }

    pub fn all_params(&self) -> ParamStore {
        let mut p = self.main.params.prefixed(MAIN_PREFIX);
        p.extend(self.audio_proj.prefixed(AUDIO_PREFIX));
        p
    }

    pub fn from_params(spec: crate::attention::BlockSpec, params: &ParamStore) -> Result<Self> {
        let main = Mwnet::from_params(spec, params.strip_prefix(MAIN_PREFIX))?;
        Ok(SingleBranchModel {
            main,
            audio_proj: params.strip_prefix(AUDIO_PREFIX),
        })
    }
}

pub fn single_forward(
    g: &Graph,
    model: &Mwnet,
    main: &Bound,
    proj: &Bound,
    x_t: Var,
    t: usize,
    context: Var,
    audio: Option<Var>,
) -> Result<Var> {
    let eps = model.time_embedding(g, main, t)?;
    let mut h = inject_audio(g, proj, model.embed(g, main, x_t)?, audio)?;
    for i in 0..model.block_count() {
        h = model.block(g, main, i, h, eps, context)?;
    }
    model.readout(g, main, h)
}

pub struct SinglePredictor<'a> {
    pub model: &'a SingleBranchModel,
    pub context: Tensor,
    pub audio: Option<Tensor>,
}

impl Predictor for SinglePredictor<'_> {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let g = Graph::new();
        let main = self.model.main.params.bind(&g, false);
        let proj = self.model.audio_proj.bind(&g, false);
        let a = self.audio.as_ref().map(|a| g.constant(a.clone()));
        let y = single_forward(&g, &self.model.main, &main, &proj, g.constant(x_t.clone()), t, g.constant(self.context.clone()), a)?;
        Ok(g.value(y))
    }
}

/// Trains every main-branch parameter plus the audio projector.
pub fn finetune_single_branch(
    model: &mut SingleBranchModel,
    examples: &[Example],
    sched: &DiffusionSchedule,
    opts: &TrainOptions,
    par: Parallelism,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("finetuning needs at least one example"));
    }
    let mut trainable = model.all_params();
    let arch = &model.main;
    let losses = train(&mut trainable, examples, sched, opts, par, |g, tb, ex, x_t, t| {
        let main = tb.strip_prefix(MAIN_PREFIX);
        let proj = tb.strip_prefix(AUDIO_PREFIX);
        let audio = ex.audio.as_ref().map(|a| g.constant(a.clone()));
        single_forward(g, arch, &main, &proj, x_t, t, g.constant(ex.context.clone()), audio)
    })?;
    model.main.params = trainable.strip_prefix(MAIN_PREFIX);
    model.audio_proj = trainable.strip_prefix(AUDIO_PREFIX);
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::BlockSpec;
    use crate::motion::FEATURE_WIDTH;
    use crate::numerics::{AdamConfig, AdamState, Grads};

    fn spec() -> BlockSpec {
        BlockSpec {
            width: 8,
            heads: 2,
            groups: 2,
            ffn_width: 16,
            layers: 2,
            context_width: 5,
            ..BlockSpec::default()
        }
    }

    fn model(seed: u64) -> DualBranchModel {
        let mut rng = SplitMix64::new(seed);
        let main = Mwnet::init(spec(), &mut rng).unwrap();
        DualBranchModel::new(main, 6, &mut rng)
    }

    fn inputs(frames: usize, rng: &mut SplitMix64) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::new(&[frames, FEATURE_WIDTH], rng.normals(frames * FEATURE_WIDTH)).unwrap(),
            Tensor::new(&[2, 5], rng.normals(10)).unwrap(),
            Tensor::new(&[frames, 6], rng.normals(frames * 6)).unwrap(),
        )
    }

    #[test]
    fn clone_matches_and_does_not_alias() {
        let mut m = model(1);
        assert_eq!(m.main.params.content_hash(), m.control.params.content_hash());
        assert!(m.main.params.same_structure(&m.control.params));
        let before = m.main.params.content_hash();
        let grads: Grads = m.control.params.iter().map(|(k, v)| (k.clone(), Tensor::ones(v.shape()))).collect();
        AdamState::new(AdamConfig::default()).step(&mut m.control.params, &grads).unwrap();
        assert_eq!(m.main.params.content_hash(), before);
        assert_ne!(m.control.params.content_hash(), before);
    }

    #[test]
    fn bridges_start_at_zero() {
        let m = model(2);
        assert!(m.bridges_are_zero());
        assert_eq!(m.bridges.len(), 2 * m.main.block_count());
        m.validate().unwrap();
    }

    #[test]
    fn zero_bridges_reproduce_main_branch() {
        let m = model(3);
        let mut rng = SplitMix64::new(30);
        for t in [1, 17, 999] {
            let (x, ctx, audio) = inputs(6, &mut rng);
            let main = main_only_predict(&m.main, &x, t, &ctx).unwrap();
            assert_eq!(dual_predict(&m, &x, t, &ctx, Some(&audio)).unwrap(), main);
            assert_eq!(dual_predict(&m, &x, t, &ctx, None).unwrap(), main);
        }
    }

    #[test]
    fn a_nonzero_bridge_changes_the_output() {
        let mut m = model(4);
        let mut rng = SplitMix64::new(40);
        let (x, ctx, audio) = inputs(5, &mut rng);
        let base = main_only_predict(&m.main, &x, 50, &ctx).unwrap();
        m.bridges.get_mut("1.w").unwrap().data_mut()[3] = 0.5;
        let y = dual_predict(&m, &x, 50, &ctx, Some(&audio)).unwrap();
        assert!(y.max_abs_diff(&base) > 1e-6);
    }

    #[test]
    fn audio_injection() {
        let mut rng = SplitMix64::new(5);
        let proj = audio_projector(3, 4, 1.0, &mut rng);
        let latent = Tensor::new(&[2, 4], rng.normals(8)).unwrap();
        let audio = Tensor::new(&[2, 3], rng.normals(6)).unwrap();
        let g = Graph::new();
        let b = proj.bind(&g, false);
        let l = g.constant(latent.clone());
        let zero = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(g.value(inject_audio(&g, &b, l, Some(zero)).unwrap()), latent);
        let y = g.value(inject_audio(&g, &b, l, Some(g.constant(audio.clone()))).unwrap());
        let w = proj.get("w").unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let expected = latent.at(r, c) + (0..3).map(|k| audio.at(r, k) * w.at(k, c)).sum::<f64>();
                assert!((y.at(r, c) - expected).abs() < 1e-14);
            }
        }
        let short = g.constant(Tensor::zeros(&[1, 3]));
        assert!(inject_audio(&g, &b, l, Some(short)).is_err());
    }

    #[test]
    fn main_branch_gets_no_gradient() {
        let m = model(6);
        let mut rng = SplitMix64::new(60);
        let (x, ctx, audio) = inputs(4, &mut rng);
        let g = Graph::new();
        let b = m.bind(&g, true);
        let y = dual_forward(&g, &m, &b, g.constant(x.clone()), 10, g.constant(ctx), Some(g.constant(audio))).unwrap();
        let loss = g.mse(y, g.constant(x)).unwrap();
        g.backward(loss).unwrap();
        assert!(b.bridges.grads(&g).values().any(|t| t.data().iter().any(|&v| v != 0.0)));
        for (_, grad) in b.main.grads(&g) {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }

    fn toy_examples(n: usize, rng: &mut SplitMix64) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let (x0, context, audio) = inputs(4, rng);
                Example { x0, context, audio: Some(audio) }
            })
            .collect()
    }

    #[test]
    fn control_training_keeps_main_frozen() {
        let mut m = model(7);
        let mut rng = SplitMix64::new(70);
        let data = toy_examples(2, &mut rng);
        let sched = DiffusionSchedule::new(100, 1e-3, 0.1).unwrap();
        let before = crate::numerics::checkpoint::params_to_bytes(&m.main.params);
        let opts = TrainOptions {
            steps: 20,
            batch_size: 2,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            ..TrainOptions::default()
        };
        let losses = train_control_stage(&mut m, &data, &sched, &opts, Parallelism::available()).unwrap();
        assert_eq!(losses.len(), 20);
        assert_eq!(crate::numerics::checkpoint::params_to_bytes(&m.main.params), before);
        assert!(!m.bridges_are_zero());
        assert!(train_control_stage(&mut m, &[], &sched, &opts, Parallelism::Sequential).is_err());
    }

    #[test]
    fn finetune_changes_main() {
        let mut rng = SplitMix64::new(8);
        let main = Mwnet::init(spec(), &mut rng).unwrap();
        let before = main.params.content_hash();
        let mut s = SingleBranchModel::new(main, 6, &mut rng);
        let data = toy_examples(2, &mut rng);
        let sched = DiffusionSchedule::new(100, 1e-3, 0.1).unwrap();
        let opts = TrainOptions { steps: 1, batch_size: 2, ..TrainOptions::default() };
        finetune_single_branch(&mut s, &data, &sched, &opts, Parallelism::Sequential).unwrap();
        assert_ne!(s.main.params.content_hash(), before);
    }

    #[test]
    fn checkpoint_prefixes_round_trip() {
        let m = model(9);
        let all = m.all_params();
        assert!(all.iter().all(|(k, _)| [MAIN_PREFIX, CONTROL_PREFIX, BRIDGE_PREFIX, AUDIO_PREFIX]
            .iter()
            .any(|p| k.starts_with(&format!("{p}/")))));
        let back = DualBranchModel::from_params(spec(), &all).unwrap();
        assert_eq!(back, m);
        let main_alone = Mwnet::from_params(spec(), all.strip_prefix(MAIN_PREFIX)).unwrap();
        assert_eq!(main_alone, m.main);
    }
}
