//! Evaluation metrics: Fréchet distance, kinetic and geometric features,
//! diversity, multimodality, retrieval precision and beat alignment.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::skeleton::{joint, yaw_rotation};
use crate::motion::{decode, JointPositions, MotionSeq, Skeleton};
use crate::numerics::SplitMix64;

/// Mean and n−1 covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::invalid(format!("statistics need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::invalid("feature vectors differ in length"));
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(FeatureStats { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues clamped at zero before the square root.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetric(m));
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The trace of the cross term is taken as `tr (√Σa Σb √Σa)^½`, which has
/// the same eigenvalues and stays symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let finite = |s: &FeatureStats| s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::NonFinite("frechet_distance"));
    }
    let (sa, sb) = (symmetric(&a.cov), symmetric(&b.cov));
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let cross: f64 = SymmetricEigen::new(symmetric(&inner))
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_distance_of(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&FeatureStats::from_samples(a)?, &FeatureStats::from_samples(b)?)
}

/// Per joint and axis, the mean squared forward-difference velocity.
pub fn kinetic_features_of(p: &JointPositions) -> Result<Vec<f64>> {
    let t = p.len();
    if t < 2 {
        return Err(Error::invalid("kinetic features need at least 2 frames"));
    }
    let j = p.joint_count();
    let mut out = vec![0.0; j * 3];
    for k in 1..t {
        for (n, (a, b)) in p.frames[k - 1].iter().zip(&p.frames[k]).enumerate() {
            let v = (b - a) * p.fps;
            for axis in 0..3 {
                out[n * 3 + axis] += v[axis] * v[axis];
            }
        }
    }
    out.iter_mut().for_each(|x| *x /= (t - 1) as f64);
    Ok(out)
}

pub fn kinetic_features(m: &MotionSeq, skeleton: &Skeleton) -> Result<Vec<f64>> {
    if m.frames() < 2 {
        return Err(Error::invalid("kinetic features need at least 2 frames"));
    }
    kinetic_features_of(&decode(m, skeleton)?)
}

/// Names of the [`geometric_features`] slots, in order.
pub const GEOMETRIC_DESCRIPTORS: [&str; 10] = [
    "left_hand_above_head",
    "right_hand_above_head",
    "left_foot_lifted",
    "right_foot_lifted",
    "feet_crossed",
    "hands_crossed",
    "left_hand_forward",
    "right_hand_forward",
    "hands_wide",
    "crouched",
];

/// Per-frame pose tests averaged over time; each slot lies in [0, 1].
///
/// Horizontal tests run in the root's heading frame (+X left, +Z forward).
/// This is a small descriptor set of its own, not a reproduction of any
/// published one.
pub fn geometric_features_of(p: &JointPositions, skeleton: &Skeleton) -> Vec<f64> {
    let rest = skeleton.rest_pose();
    let rest_pelvis = rest[joint::PELVIS].y;
    let shoulder_span = (rest[joint::L_SHOULDER] - rest[joint::R_SHOULDER]).norm();
    let mut acc = vec![0.0; GEOMETRIC_DESCRIPTORS.len()];
    for (frame, &yaw) in p.frames.iter().zip(&p.root_yaw) {
        let inv = yaw_rotation(-yaw);
        let root = frame[joint::PELVIS];
        let local = |j: usize| -> Vector3<f64> { inv * (frame[j] - root) };
        let head = frame[joint::HEAD].y;
        let (lw, rw) = (local(joint::L_WRIST), local(joint::R_WRIST));
        let (lf, rf) = (local(joint::L_FOOT), local(joint::R_FOOT));
        let tests = [
            frame[joint::L_WRIST].y > head,
            frame[joint::R_WRIST].y > head,
            frame[joint::L_FOOT].y > 0.05,
            frame[joint::R_FOOT].y > 0.05,
            lf.x < rf.x,
            lw.x < rw.x,
            lw.z > 0.2,
            rw.z > 0.2,
            (lw.x - rw.x) > 2.0 * shoulder_span + 0.5,
            root.y < 0.85 * rest_pelvis,
        ];
        for (a, hit) in acc.iter_mut().zip(tests) {
            if hit {
                *a += 1.0;
            }
        }
    }
    let n = p.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

pub fn geometric_features(m: &MotionSeq, skeleton: &Skeleton) -> Result<Vec<f64>> {
    Ok(geometric_features_of(&decode(m, skeleton)?, skeleton))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_dims(items: &[Vec<f64>]) -> Result<()> {
    if let Some(first) = items.first() {
        if items.iter().any(|v| v.len() != first.len()) {
            return Err(Error::invalid("feature vectors differ in length"));
        }
    }
    Ok(())
}

/// Mean distance over every distinct pair.
pub fn mean_pairwise_distance(items: &[Vec<f64>]) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::invalid("need at least 2 items"));
    }
    check_dims(items)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            sum += euclid(&items[i], &items[j]);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Mean distance over `pairs` random distinct pairs, or over all pairs
/// when that is no more work.
pub fn diversity(items: &[Vec<f64>], pairs: usize, rng: &mut SplitMix64) -> Result<f64> {
    let n = items.len();
    if n < 2 {
        return Err(Error::invalid(format!("diversity needs at least 2 items, got {n}")));
    }
    check_dims(items)?;
    if pairs == 0 || pairs >= n * (n - 1) / 2 {
        return mean_pairwise_distance(items);
    }
    let mut sum = 0.0;
    for _ in 0..pairs {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        sum += euclid(&items[i], &items[j]);
    }
    Ok(sum / pairs as f64)
}

/// Mean of each group's [`diversity`] with `pairs` per group.
pub fn multimodality(groups: &[Vec<Vec<f64>>], pairs: usize, rng: &mut SplitMix64) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("multimodality needs at least one group"));
    }
    let mut sum = 0.0;
    for (k, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::invalid(format!("group {k} has {} items, needs 2", g.len())));
        }
        sum += diversity(g, pairs, rng)?;
    }
    Ok(sum / groups.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub mm_dist: f64,
}

/// Rank of the matched text among a pool: the number of distractors
/// strictly closer to the motion than its own text.
fn match_rank(motion: &[f64], truth: &[f64], distractors: &[&[f64]]) -> usize {
    let d = euclid(motion, truth);
    distractors.iter().filter(|t| euclid(motion, t) < d).count()
}

/// Top-1/2/3 retrieval rates of each motion's own text among `pool − 1`
/// random distractor texts, and the mean matched-pair distance.
pub fn r_precision_mm_dist(text: &[Vec<f64>], motion: &[Vec<f64>], pool: usize, rng: &mut SplitMix64) -> Result<RetrievalScores> {
    let n = text.len();
    if motion.len() != n {
        return Err(Error::invalid("text and motion embeddings differ in count"));
    }
    if pool < 1 || n < pool {
        return Err(Error::invalid(format!("retrieval pool {pool} needs at least {pool} pairs, got {n}")));
    }
    check_dims(text)?;
    check_dims(motion)?;
    let mut hits = [0usize; 3];
    let mut mm = 0.0;
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        for k in 0..pool - 1 {
            let j = k + rng.below(others.len() - k);
            others.swap(k, j);
        }
        let distractors: Vec<&[f64]> = others[..pool - 1].iter().map(|&j| text[j].as_slice()).collect();
        let rank = match_rank(&motion[i], &text[i], &distractors);
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
        mm += euclid(&motion[i], &text[i]);
    }
    let nf = n as f64;
    Ok(RetrievalScores {
        top1: hits[0] as f64 / nf,
        top2: hits[1] as f64 / nf,
        top3: hits[2] as f64 / nf,
        mm_dist: mm / nf,
    })
}

/// Mean joint speed per frame: central differences inside, one-sided at
/// the ends, so reversing time reverses the curve exactly.
pub fn joint_speed(p: &JointPositions) -> Vec<f64> {
    let t = p.len();
    let j = p.joint_count().max(1) as f64;
    (0..t)
        .map(|k| {
            let (a, b, span) = match (k, t) {
                (_, 0 | 1) => return 0.0,
                (0, _) => (0, 1, 1.0),
                (k, t) if k == t - 1 => (k - 1, k, 1.0),
                (k, _) => (k - 1, k + 1, 2.0),
            };
            let total: f64 = p.frames[a].iter().zip(&p.frames[b]).map(|(x, y)| (y - x).norm()).sum();
            total / j * p.fps / span
        })
        .collect()
}

/// Centred moving average over an odd `window`, shrinking symmetrically
/// near the ends.
pub fn smooth(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("smoothing window must be odd, got {window}")));
    }
    let n = values.len();
    let half = window / 2;
    Ok((0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            values[i - r..=i + r].iter().sum::<f64>() / (2 * r + 1) as f64
        })
        .collect())
}

/// Times (seconds) of strict interior local minima of the smoothed speed.
pub fn beats_from_speed(speed: &[f64], fps: f64, window: usize) -> Result<Vec<f64>> {
    if speed.len() < 3 {
        return Err(Error::invalid("beat extraction needs at least 3 frames"));
    }
    let s = smooth(speed, window)?;
    Ok((1..s.len() - 1)
        .filter(|&k| s[k] < s[k - 1] && s[k] < s[k + 1])
        .map(|k| k as f64 / fps)
        .collect())
}

pub fn kinematic_beats_of(p: &JointPositions, window: usize) -> Result<Vec<f64>> {
    if p.len() < 3 {
        return Err(Error::invalid("beat extraction needs at least 3 frames"));
    }
    beats_from_speed(&joint_speed(p), p.fps, window)
}

pub fn kinematic_beats(m: &MotionSeq, skeleton: &Skeleton, window: usize) -> Result<Vec<f64>> {
    if m.frames() < 3 {
        return Err(Error::invalid("beat extraction needs at least 3 frames"));
    }
    kinematic_beats_of(&decode(m, skeleton)?, window)
}

pub const DEFAULT_BEAT_SIGMA: f64 = 0.15;

/// Mean over kinematic beats of `exp(−d²/2σ²)`, `d` the distance to the
/// nearest music beat. No kinematic beats scores 0.
pub fn beat_align_score(kin: &[f64], music: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if music.is_empty() {
        return Err(Error::invalid("no music beats"));
    }
    if kin.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = kin
        .iter()
        .map(|&t| {
            let d = music.iter().map(|&m| (t - m).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / kin.len() as f64)
}

/// Named metric values; `None` marks a metric that could not be computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn set(&mut self, key: &str, value: Result<f64>) {
        self.metrics.insert(key.to_string(), value.ok().filter(|v| v.is_finite()));
    }

    pub fn echo(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied().flatten()
    }

    /// `key=value` lines; absent metrics read `absent`.
    pub fn to_kv(&self) -> String {
        let mut s = format!("config_hash={}\n", self.config_hash);
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        for (k, v) in &self.metrics {
            match v {
                Some(v) => s.push_str(&format!("{k}={v}\n")),
                None => s.push_str(&format!("{k}=absent\n")),
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::synth::static_pose;
    use crate::motion::FPS;

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            n: 10,
        }
    }

    #[test]
    fn frechet_simple_cases() {
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-9);
        // (μ1−μ2)² + (σ1−σ2)²
        let d = frechet_distance(&stats_1d(1.0, 4.0), &stats_1d(0.0, 9.0)).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let mut rng = SplitMix64::new(1);
        let samples: Vec<Vec<f64>> = (0..50).map(|_| rng.normals(4)).collect();
        let s = FeatureStats::from_samples(&samples).unwrap();
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-10);
        assert!(frechet_distance(&s, &stats_1d(0.0, 1.0)).is_err());
        assert!(FeatureStats::from_samples(&samples[..1]).is_err());
    }

    /// Square root of a general matrix by Denman–Beavers iteration.
    fn denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut y = a.clone();
        let mut z = DMatrix::identity(n, n);
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            let nz = (&z + yi) * 0.5;
            let done = (&ny - &y).norm() < 1e-15 * ny.norm();
            y = ny;
            z = nz;
            if done {
                break;
            }
        }
        y
    }

    fn random_spd(d: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn frechet_matches_independent_square_root() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..5 {
            let (ca, cb) = (random_spd(5, &mut rng), random_spd(5, &mut rng));
            let (ma, mb) = (DVector::from_fn(5, |_, _| rng.normal()), DVector::from_fn(5, |_, _| rng.normal()));
            let oracle = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * denman_beavers(&(&ca * &cb)).trace();
            let a = FeatureStats { mean: ma, cov: ca, n: 100 };
            let b = FeatureStats { mean: mb, cov: cb, n: 100 };
            let ours = frechet_distance(&a, &b).unwrap();
            assert!((ours - oracle).abs() < 1e-8 * oracle.max(1.0), "{ours} vs {oracle}");
            assert!((frechet_distance(&b, &a).unwrap() - ours).abs() < 1e-8 * ours.max(1.0));
        }
    }

    fn single_joint_track(values: &[f64]) -> JointPositions {
        let frames = values
            .iter()
            .map(|&x| {
                let mut f = vec![Vector3::zeros(); 22];
                f[3] = Vector3::new(x, 0.0, 0.0);
                f
            })
            .collect();
        JointPositions::new(FPS, frames, vec![0.0; values.len()]).unwrap()
    }

    #[test]
    fn kinetic_cases() {
        let sk = Skeleton::smpl22();
        let still = static_pose(&sk, 10, FPS);
        assert!(kinetic_features_of(&still).unwrap().iter().all(|&v| v == 0.0));
        let v = 1.5;
        let line: Vec<f64> = (0..30).map(|k| v * k as f64 / FPS).collect();
        let f = kinetic_features_of(&single_joint_track(&line)).unwrap();
        assert!((f[9] - v * v).abs() < 1e-12);
        assert_eq!(f.iter().filter(|&&x| x != 0.0).count(), 1);
        // x = A sin(ωt) over whole periods: mean x'² = A²ω²/2.
        let (amp, w) = (0.3, std::f64::consts::TAU);
        let osc: Vec<f64> = (0..=200).map(|k| amp * (w * k as f64 / FPS).sin()).collect();
        let f = kinetic_features_of(&single_joint_track(&osc)).unwrap();
        let analytic = amp * amp * w * w / 2.0;
        assert!((f[9] - analytic).abs() / analytic < 0.02);
        assert!(kinetic_features_of(&single_joint_track(&[0.0])).is_err());
    }

    fn arms_up_pose(sk: &Skeleton) -> Vec<Vector3<f64>> {
        let mut p = sk.rest_pose();
        for (w, e, s) in [(joint::L_WRIST, joint::L_ELBOW, joint::L_SHOULDER), (joint::R_WRIST, joint::R_ELBOW, joint::R_SHOULDER)] {
            let base = p[s];
            p[e] = base + Vector3::new(0.0, 0.26, 0.0);
            p[w] = base + Vector3::new(0.0, 0.51, 0.0);
        }
        p
    }

    #[test]
    fn geometric_cases() {
        let sk = Skeleton::smpl22();
        let t = static_pose(&sk, 8, FPS);
        let g = geometric_features_of(&t, &sk);
        assert_eq!(g.len(), GEOMETRIC_DESCRIPTORS.len());
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
        let up = JointPositions::new(FPS, vec![arms_up_pose(&sk); 8], vec![0.0; 8]).unwrap();
        let g_up = geometric_features_of(&up, &sk);
        assert_eq!((g_up[0], g_up[1]), (1.0, 1.0));
        let mut frames = vec![sk.rest_pose(); 4];
        frames.extend(vec![arms_up_pose(&sk); 4]);
        let half = JointPositions::new(FPS, frames, vec![0.0; 8]).unwrap();
        let g_half = geometric_features_of(&half, &sk);
        for k in 0..g.len() {
            if g[k] != g_up[k] {
                assert_eq!(g_half[k], 0.5, "{}", GEOMETRIC_DESCRIPTORS[k]);
            }
        }
    }

    #[test]
    fn diversity_cases() {
        let mut rng = SplitMix64::new(3);
        let same = vec![vec![1.0, 2.0]; 5];
        assert_eq!(diversity(&same, 3, &mut rng).unwrap(), 0.0);
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(diversity(&two, 10, &mut rng).unwrap(), 5.0);
        assert!(diversity(&two[..1], 10, &mut rng).is_err());
        let many: Vec<Vec<f64>> = (0..100).map(|_| rng.normals(6)).collect();
        let exact = mean_pairwise_distance(&many).unwrap();
        let est = diversity(&many, 2000, &mut rng).unwrap();
        assert!((est - exact).abs() / exact < 0.05);
        let shifted: Vec<Vec<f64>> = many.iter().map(|v| v.iter().map(|x| x + 7.0).collect()).collect();
        assert!((mean_pairwise_distance(&shifted).unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn multimodality_cases() {
        let mut rng = SplitMix64::new(4);
        let flat = vec![vec![vec![1.0]; 3], vec![vec![2.0]; 4]];
        assert_eq!(multimodality(&flat, 5, &mut rng).unwrap(), 0.0);
        let one = vec![vec![vec![0.0, 0.0], vec![0.0, 2.0]]];
        assert_eq!(multimodality(&one, 5, &mut rng).unwrap(), 2.0);
        assert!(multimodality(&[vec![vec![1.0]]], 5, &mut rng).is_err());
        let groups: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..40).map(|_| rng.normals(3)).collect()).collect();
        let exact = groups.iter().map(|g| mean_pairwise_distance(g).unwrap()).sum::<f64>() / 5.0;
        let est = multimodality(&groups, 400, &mut rng).unwrap();
        assert!((est - exact).abs() / exact < 0.05);
    }

    #[test]
    fn retrieval_with_oracle_and_random_embeddings() {
        let mut rng = SplitMix64::new(5);
        let text: Vec<Vec<f64>> = (0..64).map(|_| rng.normals(8)).collect();
        let r = r_precision_mm_dist(&text, &text, 32, &mut rng).unwrap();
        assert_eq!((r.top1, r.top2, r.top3, r.mm_dist), (1.0, 1.0, 1.0, 0.0));
        let n = 2048;
        let text: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(8)).collect();
        let motion: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(8)).collect();
        let r = r_precision_mm_dist(&text, &motion, 32, &mut rng).unwrap();
        let p = 1.0 / 32.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.top1 - p).abs() < 3.0 * sd, "{}", r.top1);
        assert!(r_precision_mm_dist(&text[..10], &motion[..10], 32, &mut rng).is_err());
    }

    #[test]
    fn retrieval_pool_of_two_by_hand() {
        // Motions 0 and 1 sit nearer their own texts; motion 2 nearer text 0.
        let text = vec![vec![0.0], vec![10.0], vec![20.0]];
        let motion = vec![vec![1.0], vec![9.0], vec![4.0]];
        let mut rng = SplitMix64::new(6);
        let r = r_precision_mm_dist(&text, &motion, 2, &mut rng).unwrap();
        // Motion 2 (16 from its text) loses to text 0 (4 away) and text 1
        // (6 away), so it misses top-1 with either distractor; top-2 covers
        // the whole pool.
        assert!((r.top1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.top2, 1.0);
        assert!((r.mm_dist - (1.0 + 1.0 + 16.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn beats_from_speed_cases() {
        assert!(beats_from_speed(&[1.0; 20], FPS, 1).unwrap().is_empty());
        let mut dip = vec![1.0; 20];
        dip[7] = 0.2;
        assert_eq!(beats_from_speed(&dip, FPS, 1).unwrap(), vec![7.0 / FPS]);
        let speed: Vec<f64> = (0..101).map(|k| (std::f64::consts::TAU * k as f64 / FPS).sin().abs()).collect();
        let beats = beats_from_speed(&speed, FPS, 3).unwrap();
        let zeros: Vec<f64> = (1..10).map(|k| 0.5 * k as f64).collect();
        assert_eq!(beats.len(), zeros.len());
        for (b, z) in beats.iter().zip(&zeros) {
            assert!((b - z).abs() <= 1.0 / FPS);
        }
        assert!(beats_from_speed(&[1.0, 2.0], FPS, 1).is_err());
        assert!(smooth(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn time_reversal_reverses_beats() {
        let sk = Skeleton::smpl22();
        let p = crate::motion::synth::Style::Dance.generate(&sk, 61, FPS, &Default::default());
        let mut rev = p.clone();
        rev.frames.reverse();
        rev.root_yaw.reverse();
        let fwd = kinematic_beats_of(&p, 3).unwrap();
        let back = kinematic_beats_of(&rev, 3).unwrap();
        let span = 60.0 / FPS;
        let mirrored: Vec<f64> = back.iter().rev().map(|b| span - b).collect();
        assert_eq!(fwd.len(), mirrored.len());
        for (a, b) in fwd.iter().zip(mirrored) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(!fwd.is_empty());
    }

    #[test]
    fn beat_alignment_cases() {
        let music: Vec<f64> = (0..10).map(|k| 0.5 * k as f64).collect();
        assert_eq!(beat_align_score(&music, &music, 0.15).unwrap(), 1.0);
        let delta = 0.07;
        let kin: Vec<f64> = music.iter().map(|m| m + delta).collect();
        let expected = (-delta * delta / (2.0 * 0.15 * 0.15)).exp();
        assert!((beat_align_score(&kin, &music, 0.15).unwrap() - expected).abs() < 1e-12);
        assert_eq!(beat_align_score(&[], &music, 0.15).unwrap(), 0.0);
        assert!(beat_align_score(&kin, &[], 0.15).is_err());
        assert!(beat_align_score(&kin, &music, 0.0).is_err());
        let mut last = 1.0;
        for step in 1..10 {
            let d = 0.02 * step as f64;
            let kin: Vec<f64> = music.iter().map(|m| m + d).collect();
            let s = beat_align_score(&kin, &music, 0.15).unwrap();
            assert!(s <= last && (0.0..=1.0).contains(&s));
            last = s;
        }
    }

    #[test]
    fn report_formats() {
        let mut r = MetricsReport { config_hash: "abc".into(), ..Default::default() };
        r.set("fid_k", Ok(1.5));
        r.set("bas", Err(Error::invalid("none")));
        r.echo("seed", 3);
        let kv = r.to_kv();
        assert!(kv.contains("fid_k=1.5") && kv.contains("bas=absent") && kv.contains("config.seed=3"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.get("bas"), None);
    }
}
