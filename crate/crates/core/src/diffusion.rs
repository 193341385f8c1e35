//! DDPM with a linear β schedule and x_start prediction.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `ᾱ_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, SplitMix64, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// β linear from `beta_start` at t = 1 to `beta_end` at t = `steps`.
    /// A one-step schedule uses `beta_start`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::new(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients of x_start and x_t in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `√ᾱ_t x0 + √(1 − ᾱ_t) noise`
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(t)?;
    same_shape("q_sample", x0, noise)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, n)| a * x + b * n).collect();
    Tensor::new(x0.shape(), data)
}

/// One ancestral step from `x_t` to `x_{t−1}`. `noise` is ignored at t = 1,
/// where the result is `x_start_pred` itself.
pub fn p_sample_step(
    x_t: &Tensor,
    t: usize,
    x_start_pred: &Tensor,
    sched: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check(t)?;
    same_shape("p_sample_step", x_t, x_start_pred)?;
    if t == 1 {
        return Ok(x_start_pred.clone());
    }
    same_shape("p_sample_step", x_t, noise)?;
    let (c0, ct) = sched.posterior_coefficients(t);
    let sigma = sched.posterior_variance(t).sqrt();
    let data = x_start_pred
        .data()
        .iter()
        .zip(x_t.data())
        .zip(noise.data())
        .map(|((x0, xt), n)| c0 * x0 + ct * xt + sigma * n)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// A conditioned x_start predictor used while sampling.
pub trait Predictor: Sync {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> Predictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor> + Sync,
{
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// A conditioned x_start predictor on a autodiff graph, used for training.
pub trait Denoiser {
    fn denoise(&self, g: &Graph, x_t: Var, t: usize) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    /// Clamp magnitude for x_start predictions; `None` leaves them as is.
    pub clamp_x0: Option<f64>,
    /// Guidance weight. Only 1.0 (no guidance) is supported.
    pub guidance: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            clamp_x0: None,
            guidance: 1.0,
        }
    }
}

/// Ancestral sampling of a `frames × width` sample from pure noise.
pub fn sample(
    model: &(impl Predictor + ?Sized),
    frames: usize,
    width: usize,
    sched: &DiffusionSchedule,
    rng: &mut SplitMix64,
    opts: &SampleOptions,
) -> Result<Tensor> {
    if opts.guidance != 1.0 {
        return Err(Error::invalid("guidance weights other than 1.0 are not supported"));
    }
    if frames == 0 {
        return Err(Error::invalid("cannot sample zero frames"));
    }
    let shape = [frames, width];
    let n = frames * width;
    let mut x = Tensor::new(&shape, rng.normals(n))?;
    for t in (1..=sched.steps()).rev() {
        let mut x0 = model.predict_x0(&x, t)?;
        if let Some(c) = opts.clamp_x0 {
            x0 = x0.map(|v| v.clamp(-c, c));
        }
        let noise = if t > 1 { Tensor::new(&shape, rng.normals(n))? } else { Tensor::zeros(&shape) };
        x = p_sample_step(&x, t, &x0, sched, &noise)?;
        if !x.all_finite() {
            return Err(Error::NonFinite("sample"));
        }
    }
    Ok(x)
}

/// x_start MSE at a given timestep and noise draw.
pub fn training_loss_at(
    g: &Graph,
    model: &impl Denoiser,
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let x_t = g.constant(q_sample(x0, t, noise, sched)?);
    let pred = model.denoise(g, x_t, t)?;
    g.mse(pred, g.constant(x0.clone()))
}

/// x_start MSE with t uniform over `1..=steps` and fresh noise.
/// Returns the loss node and the drawn timestep.
pub fn training_loss(
    g: &Graph,
    model: &impl Denoiser,
    x0: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut SplitMix64,
) -> Result<(Var, usize)> {
    let t = 1 + rng.below(sched.steps());
    let noise = Tensor::new(x0.shape(), rng.normals(x0.len()))?;
    Ok((training_loss_at(g, model, x0, t, &noise, sched)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> DiffusionSchedule {
        DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = default_schedule();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 0.0001);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha_bar(1), 0.9999);
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
        }
    }

    #[test]
    fn final_alpha_bar_matches_high_precision_product() {
        // 50-digit cumulative product of (1 - beta_i).
        let s = default_schedule();
        let expected = 4.035_829_765_375_683_5e-5;
        assert!((s.alpha_bar(1000) - expected).abs() / expected < 1e-11, "{}", s.alpha_bar(1000));
        let mid = 0.078_587_242_881_778_24;
        assert!((s.alpha_bar(500) - mid).abs() / mid < 1e-12);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(DiffusionSchedule::new(0, 1e-4, 0.02).is_err());
        assert!(DiffusionSchedule::new(10, 0.02, 1e-4).is_err());
        assert!(DiffusionSchedule::new(10, 0.0, 0.02).is_err());
        assert!(DiffusionSchedule::new(10, 1e-4, 1.0).is_err());
        let one = DiffusionSchedule::new(1, 1e-4, 0.02).unwrap();
        assert_eq!(one.beta(1), 1e-4);
    }

    #[test]
    fn posterior_mean_fixes_the_noise_free_trajectory() {
        // x_t = √ᾱ_t x0 with x_start_pred = x0 must map to √ᾱ_{t−1} x0.
        let s = default_schedule();
        for t in 1..=1000 {
            let (a, b) = s.posterior_coefficients(t);
            let lhs = a + b * s.alpha_bar(t).sqrt();
            assert!((lhs - s.alpha_bar(t - 1).sqrt()).abs() < 1e-10, "t={t}");
        }
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn posterior_coefficients_do_not_sum_to_one() {
        let s = default_schedule();
        let (a, b) = s.posterior_coefficients(1);
        assert!((a + b - 1.0).abs() < 1e-12);
        let (a, b) = s.posterior_coefficients(1000);
        assert!((a + b - 1.0).abs() > 5e-3);
    }

    #[test]
    fn q_sample_limits() {
        let s = default_schedule();
        let x0 = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        let y = q_sample(&x0, 10, &zero, &s).unwrap();
        let a = s.alpha_bar(10).sqrt();
        for (y, x) in y.data().iter().zip(x0.data()) {
            assert_eq!(*y, a * x);
        }
        let noise = Tensor::new(&[2, 3], vec![0.3, 0.1, -0.2, 1.0, 2.0, -0.5]).unwrap();
        let y = q_sample(&x0, 1000, &noise, &s).unwrap();
        assert!(y.max_abs_diff(&noise) < 0.02);
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
        assert!(q_sample(&x0, 1001, &zero, &s).is_err());
    }

    #[test]
    fn q_sample_marginals() {
        let s = default_schedule();
        let x0 = Tensor::new(&[1, 4], vec![1.0, -0.5, 2.0, 0.0]).unwrap();
        let mut rng = SplitMix64::new(77);
        let draws = 10_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let noise = Tensor::new(&[1, 4], rng.normals(4)).unwrap();
            let y = q_sample(&x0, 500, &noise, &s).unwrap();
            for i in 0..4 {
                sum[i] += y.data()[i];
                sq[i] += y.data()[i].powi(2);
            }
        }
        let ab = s.alpha_bar(500);
        let var = 1.0 - ab;
        for i in 0..4 {
            let mean = sum[i] / draws as f64;
            let v = sq[i] / draws as f64 - mean * mean;
            let target = ab.sqrt() * x0.data()[i];
            assert!((mean - target).abs() < 3.0 * (var / draws as f64).sqrt(), "mean {i}");
            assert!((v - var).abs() / var < 0.05, "var {i}");
        }
    }

    #[test]
    fn last_step_returns_prediction() {
        let s = default_schedule();
        let x = Tensor::full(&[2, 2], 5.0);
        let p = Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let noise = Tensor::full(&[2, 2], 9.0);
        assert_eq!(p_sample_step(&x, 1, &p, &s, &noise).unwrap(), p);
    }

    #[test]
    fn oracle_reverse_loop_recovers_x0() {
        let s = default_schedule();
        let mut rng = SplitMix64::new(8);
        let x0 = Tensor::new(&[6, 5], rng.normals(30)).unwrap();
        let zero = Tensor::zeros(&[6, 5]);
        let mut x = q_sample(&x0, 1000, &Tensor::new(&[6, 5], rng.normals(30)).unwrap(), &s).unwrap();
        for t in (1..=1000).rev() {
            x = p_sample_step(&x, t, &x0, &s, &zero).unwrap();
        }
        assert!(x.mse(&x0) < 1e-6);
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = DiffusionSchedule::new(50, 1e-3, 0.2).unwrap();
        let model = |x: &Tensor, t: usize| Ok(x.map(|v| v * 0.5 + t as f64 * 1e-3));
        let a = sample(&model, 4, 3, &s, &mut SplitMix64::new(3), &SampleOptions::default()).unwrap();
        let b = sample(&model, 4, 3, &s, &mut SplitMix64::new(3), &SampleOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 3]);
        let bad = SampleOptions { guidance: 2.0, ..SampleOptions::default() };
        assert!(sample(&model, 4, 3, &s, &mut SplitMix64::new(3), &bad).is_err());
    }

    struct Fixed(Tensor);

    impl Denoiser for Fixed {
        fn denoise(&self, g: &Graph, _x_t: Var, _t: usize) -> Result<Var> {
            Ok(g.constant(self.0.clone()))
        }
    }

    #[test]
    fn loss_of_oracle_and_zero_models() {
        let s = default_schedule();
        let x0 = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let g = Graph::new();
        let mut rng = SplitMix64::new(1);
        let (l, _) = training_loss(&g, &Fixed(x0.clone()), &x0, &s, &mut rng).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let (l, t) = training_loss(&g, &Fixed(Tensor::zeros(&[2, 3])), &x0, &s, &mut rng).unwrap();
        let expected = x0.data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
        assert!((1..=1000).contains(&t));
    }
}
