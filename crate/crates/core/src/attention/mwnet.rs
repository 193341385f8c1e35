//! The MWNet denoiser: input projection, a stack of multi-wise blocks, and
//! an output projection back to feature space.

use super::ops::{self, Qkv, LN_EPS};
use super::spec::{BlockSpec, ModuleKind, NormPlacement};
use crate::error::{Error, Result};
use crate::motion::FEATURE_WIDTH;
use crate::numerics::{Bound, Graph, ParamStore, SplitMix64, Tensor, Var};

/// Sinusoidal features: `sin(p / 10000^(2i/w))` on even, `cos` on odd columns.
pub fn sinusoidal(position: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| {
            let i = (c / 2) as f64;
            let freq = 10000f64.powf(-2.0 * i / width as f64);
            if c % 2 == 0 {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

/// `frames × width` positional encoding.
pub fn positional_encoding(frames: usize, width: usize) -> Tensor {
    let data = (0..frames).flat_map(|p| sinusoidal(p as f64, width)).collect();
    Tensor::new(&[frames, width], data).expect("encoding shape")
}

/// Pieces of a denoising branch that a control branch can hook into.
pub trait BranchModel {
    fn spec(&self) -> &BlockSpec;
    fn params(&self) -> &ParamStore;

    /// Features (`T × 263`) to the latent (`T × C`) entering block 0.
    fn embed(&self, g: &Graph, b: &Bound, x_t: Var) -> Result<Var>;

    /// Timestep embedding ε_t, `1 × C`.
    fn time_embedding(&self, g: &Graph, b: &Bound, t: usize) -> Result<Var>;

    fn block(&self, g: &Graph, b: &Bound, index: usize, h: Var, eps_t: Var, context: Var) -> Result<Var>;

    /// Latent back to features.
    fn readout(&self, g: &Graph, b: &Bound, h: Var) -> Result<Var>;

    fn block_count(&self) -> usize {
        self.spec().layers
    }

    fn forward(&self, g: &Graph, b: &Bound, x_t: Var, t: usize, context: Var) -> Result<Var> {
        let eps = self.time_embedding(g, b, t)?;
        let mut h = self.embed(g, b, x_t)?;
        for i in 0..self.block_count() {
            h = self.block(g, b, i, h, eps, context)?;
        }
        self.readout(g, b, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mwnet {
    pub spec: BlockSpec,
    pub params: ParamStore,
}

fn module_prefix(block: usize, module: usize) -> String {
    format!("blocks.{block}.m{module}")
}

impl Mwnet {
    pub fn init(spec: BlockSpec, rng: &mut SplitMix64) -> Result<Self> {
        spec.validate()?;
        let c = spec.width;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.init_normal("in.w", &[FEATURE_WIDTH, c], lin(FEATURE_WIDTH), rng);
        p.init_zeros("in.b", &[1, c]);
        p.init_normal("time.w1", &[c, c], lin(c), rng);
        p.init_zeros("time.b1", &[1, c]);
        p.init_normal("time.w2", &[c, c], lin(c), rng);
        p.init_zeros("time.b2", &[1, c]);
        for b in 0..spec.layers {
            for (m, kind) in spec.order.modules().iter().enumerate() {
                let pre = module_prefix(b, m);
                match kind {
                    ModuleKind::TimeSelf | ModuleKind::ChannelSelf => {
                        for w in ["wq", "wk", "wv"] {
                            p.init_normal(&format!("{pre}.{w}"), &[c, c], lin(c), rng);
                        }
                    }
                    ModuleKind::Cross => {
                        p.init_normal(&format!("{pre}.wq"), &[c, c], lin(c), rng);
                        for w in ["wk", "wv"] {
                            p.init_normal(&format!("{pre}.{w}"), &[spec.context_width, c], lin(spec.context_width), rng);
                        }
                    }
                    ModuleKind::FeedForward => {
                        p.init_normal(&format!("{pre}.w1"), &[c, spec.ffn_width], lin(c), rng);
                        p.init_zeros(&format!("{pre}.b1"), &[1, spec.ffn_width]);
                        p.init_normal(&format!("{pre}.w2"), &[spec.ffn_width, c], lin(spec.ffn_width), rng);
                        p.init_zeros(&format!("{pre}.b2"), &[1, c]);
                    }
                }
                p.init_normal(&format!("{pre}.film.w1"), &[c, c], 0.02, rng);
                p.init_normal(&format!("{pre}.film.w2"), &[c, c], 0.02, rng);
            }
        }
        p.init_normal("out.w", &[c, FEATURE_WIDTH], lin(c), rng);
        p.init_zeros("out.b", &[1, FEATURE_WIDTH]);
        Ok(Mwnet { spec, params: p })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(spec: BlockSpec, params: ParamStore) -> Result<Self> {
        let reference = Mwnet::init(spec.clone(), &mut SplitMix64::new(0))?;
        reference.params.check_compatible(&params)?;
        Ok(Mwnet { spec, params })
    }

    /// (attention-or-FFN modules, FiLM layers) in one block.
    pub fn block_module_counts(&self) -> (usize, usize) {
        let films = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("blocks.0.") && k.ends_with(".film.w1"))
            .count();
        (self.spec.order.modules().len(), films)
    }

    /// One forward pass on a fresh graph with all parameters constant.
    pub fn predict(&self, x_t: &Tensor, t: usize, context: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let x = g.constant(x_t.clone());
        let ctx = g.constant(context.clone());
        let y = self.forward(&g, &b, x, t, ctx)?;
        Ok(g.value(y))
    }

    fn module(&self, g: &Graph, b: &Bound, pre: &str, kind: ModuleKind, x: Var, context: Var) -> Result<Var> {
        let qkv = || Qkv {
            wq: b.var(&format!("{pre}.wq")),
            wk: b.var(&format!("{pre}.wk")),
            wv: b.var(&format!("{pre}.wv")),
        };
        match kind {
            ModuleKind::TimeSelf => ops::time_wise_sa(g, x, qkv(), self.spec.heads),
            ModuleKind::ChannelSelf => ops::channel_wise_sa(g, x, qkv(), self.spec.groups),
            ModuleKind::Cross => ops::cross_attention(g, x, context, qkv(), self.spec.heads),
            ModuleKind::FeedForward => ops::feed_forward(
                g,
                x,
                b.var(&format!("{pre}.w1")),
                b.var(&format!("{pre}.b1")),
                b.var(&format!("{pre}.w2")),
                b.var(&format!("{pre}.b2")),
            ),
        }
    }
}

impl BranchModel for Mwnet {
    fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn embed(&self, g: &Graph, b: &Bound, x_t: Var) -> Result<Var> {
        let shape = g.shape(x_t);
        if shape.len() != 2 || shape[1] != FEATURE_WIDTH || shape[0] == 0 {
            return Err(Error::shape("mwnet input", &shape, &[0, FEATURE_WIDTH]));
        }
        let h = ops::linear(g, x_t, b.var("in.w"), Some(b.var("in.b")))?;
        let pe = g.constant(positional_encoding(shape[0], self.spec.width));
        g.add(h, pe)
    }

    fn time_embedding(&self, g: &Graph, b: &Bound, t: usize) -> Result<Var> {
        let c = self.spec.width;
        let raw = g.constant(Tensor::new(&[1, c], sinusoidal(t as f64, c))?);
        let h = g.gelu(ops::linear(g, raw, b.var("time.w1"), Some(b.var("time.b1")))?)?;
        ops::linear(g, h, b.var("time.w2"), Some(b.var("time.b2")))
    }

    fn block(&self, g: &Graph, b: &Bound, index: usize, mut h: Var, eps_t: Var, context: Var) -> Result<Var> {
        if index >= self.spec.layers {
            return Err(Error::invalid(format!("block {index} of {}", self.spec.layers)));
        }
        for (m, &kind) in self.spec.order.modules().iter().enumerate() {
            let pre = module_prefix(index, m);
            h = match self.spec.norm {
                NormPlacement::Pre => {
                    let n = g.layer_norm(h, 1, LN_EPS)?;
                    g.add(h, self.module(g, b, &pre, kind, n, context)?)?
                }
                NormPlacement::Post => {
                    let y = self.module(g, b, &pre, kind, h, context)?;
                    g.layer_norm(g.add(h, y)?, 1, LN_EPS)?
                }
            };
            h = ops::film(g, h, eps_t, b.var(&format!("{pre}.film.w1")), b.var(&format!("{pre}.film.w2")))?;
        }
        Ok(h)
    }

    fn readout(&self, g: &Graph, b: &Bound, h: Var) -> Result<Var> {
        let n = g.layer_norm(h, 1, LN_EPS)?;
        ops::linear(g, n, b.var("out.w"), Some(b.var("out.b")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param_grad_check;

    fn small(order: &str) -> BlockSpec {
        BlockSpec {
            order: order.parse().unwrap(),
            width: 8,
            heads: 2,
            groups: 2,
            ffn_width: 16,
            layers: 2,
            context_width: 6,
            norm: NormPlacement::Pre,
        }
    }

    fn inputs(frames: usize, rng: &mut SplitMix64) -> (Tensor, Tensor) {
        let x = Tensor::new(&[frames, FEATURE_WIDTH], rng.normals(frames * FEATURE_WIDTH)).unwrap();
        let ctx = Tensor::new(&[3, 6], rng.normals(18)).unwrap();
        (x, ctx)
    }

    #[test]
    fn module_and_film_counts() {
        let mut rng = SplitMix64::new(1);
        let m = Mwnet::init(small("T/CA/F"), &mut rng).unwrap();
        assert_eq!(m.block_module_counts(), (3, 3));
        let m = Mwnet::init(small("CS/F/T/CA/F"), &mut rng).unwrap();
        assert_eq!(m.block_module_counts(), (5, 5));
    }

    #[test]
    fn output_shapes() {
        let mut rng = SplitMix64::new(2);
        let m = Mwnet::init(small("CS/F/T/CA/F"), &mut rng).unwrap();
        for frames in [1, 16, 196] {
            let (x, ctx) = inputs(frames, &mut rng);
            let y = m.predict(&x, 500, &ctx).unwrap();
            assert_eq!(y.shape(), &[frames, FEATURE_WIDTH]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let mut rng = SplitMix64::new(3);
        let mut m = Mwnet::init(small("CS/F/T/CA/F"), &mut rng).unwrap();
        *m.params.get_mut("out.w").unwrap() = Tensor::zeros(&[8, FEATURE_WIDTH]);
        let (x, ctx) = inputs(5, &mut rng);
        let y = m.predict(&x, 10, &ctx).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_finite_on_wide_inputs() {
        let mut rng = SplitMix64::new(4);
        for norm in [NormPlacement::Pre, NormPlacement::Post] {
            let mut spec = small("CS/F/T/CA/F");
            spec.norm = norm;
            let m = Mwnet::init(spec, &mut rng).unwrap();
            let x = Tensor::new(&[7, FEATURE_WIDTH], (0..7 * FEATURE_WIDTH).map(|_| rng.range(-10.0, 10.0)).collect()).unwrap();
            let ctx = Tensor::new(&[2, 6], (0..12).map(|_| rng.range(-10.0, 10.0)).collect()).unwrap();
            let a = m.predict(&x, 999, &ctx).unwrap();
            let b = m.predict(&x, 999, &ctx).unwrap();
            assert_eq!(a, b);
            assert!(a.all_finite());
        }
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let mut rng = SplitMix64::new(5);
        let m = Mwnet::init(small("T/CA/F"), &mut rng).unwrap();
        let x = Tensor::zeros(&[4, 10]);
        let ctx = Tensor::zeros(&[1, 6]);
        assert!(m.predict(&x, 1, &ctx).is_err());
        let bad_ctx = Tensor::zeros(&[1, 5]);
        assert!(m.predict(&Tensor::zeros(&[4, FEATURE_WIDTH]), 1, &bad_ctx).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(6);
        let mut spec = small("CS/F/T/CA/F");
        spec.layers = 1;
        let m = Mwnet::init(spec, &mut rng).unwrap();
        let (x, ctx) = inputs(3, &mut rng);
        let target = Tensor::new(&[3, FEATURE_WIDTH], rng.normals(3 * FEATURE_WIDTH)).unwrap();
        // Only a handful of tensors; the full store is too slow to probe.
        let probe: ParamStore = {
            let mut p = ParamStore::new();
            for k in ["blocks.0.m0.wq", "blocks.0.m3.wk", "blocks.0.m1.b1", "time.w1", "blocks.0.m2.film.w2"] {
                p.insert(k, m.params.get(k).unwrap().clone());
            }
            p
        };
        let err = param_grad_check(
            |g, bound| {
                let b = m.params.bind(g, false).overlay(bound);
                let y = m.forward(g, &b, g.constant(x.clone()), 40, g.constant(ctx.clone()))?;
                g.mse(y, g.constant(target.clone()))
            },
            &probe,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
