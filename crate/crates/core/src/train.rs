//! Mini-batch diffusion training shared by every stage.
//!
//! Each example in a batch gets its own graph, timestep and noise draw,
//! derived from `(seed, step, slot)`, so the per-example work can fan out
//! over threads and still reproduce the sequential result bit for bit.

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::params::{accumulate, scale_grads};
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, Grads, ParamStore, SplitMix64, Tensor, Var};
use crate::par::Parallelism;

/// One training triple in model space (normalised features).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x0: Tensor,
    /// Text embedding, `tokens × C_ctx`.
    pub context: Tensor,
    /// Audio features length-matched to `x0`, if any.
    pub audio: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Rescales the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            batch_size: 8,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Batch indices for `step`: every example when the batch covers the set,
/// otherwise a draw without replacement.
fn batch_indices(n: usize, batch: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if batch >= n {
        return idx;
    }
    for i in 0..batch {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(batch);
    idx
}

/// Trains `params` for `opts.steps` Adam steps on the x_start MSE.
///
/// `forward(g, bound, example, x_t, t)` returns the x_start prediction with
/// `bound` holding `params` as tracked leaves. Returns the mean batch loss
/// of every step.
pub fn train<F>(
    params: &mut ParamStore,
    examples: &[Example],
    sched: &DiffusionSchedule,
    opts: &TrainOptions,
    par: Parallelism,
    forward: F,
) -> Result<Vec<f64>>
where
    F: Fn(&Graph, &Bound, &Example, Var, usize) -> Result<Var> + Sync,
{
    if examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut adam = AdamState::new(opts.adam);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut rng = SplitMix64::derive(opts.seed, step as u64);
        let batch = batch_indices(examples.len(), opts.batch_size, &mut rng);
        let seeds: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.next())).collect();
        let snapshot = &*params;
        let results = par.map(seeds, |(i, seed)| -> Result<(f64, Grads)> {
            let ex = &examples[i];
            let mut r = SplitMix64::new(seed);
            let t = 1 + r.below(sched.steps());
            let noise = Tensor::new(ex.x0.shape(), r.normals(ex.x0.len()))?;
            let g = Graph::new();
            let bound = snapshot.bind(&g, true);
            let x_t = g.constant(q_sample(&ex.x0, t, &noise, sched)?);
            let pred = forward(&g, &bound, ex, x_t, t)?;
            let loss = g.mse(pred, g.constant(ex.x0.clone()))?;
            g.backward(loss)?;
            Ok((g.value(loss).data()[0], bound.grads(&g)))
        });
        let mut total = Grads::new();
        let mut loss_sum = 0.0;
        for r in results {
            let (l, grads) = r?;
            loss_sum += l;
            accumulate(&mut total, grads);
        }
        let b = batch.len() as f64;
        scale_grads(&mut total, 1.0 / b);
        let norm = global_norm(&total);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        if let Some(max) = opts.clip_norm {
            if norm > max {
                scale_grads(&mut total, max / norm);
            }
        }
        adam.step(params, &total)?;
        losses.push(loss_sum / b);
    }
    Ok(losses)
}
