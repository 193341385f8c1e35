//! The 263-wide per-frame motion features.
//!
//! Per frame, in order:
//!
//! | slice      | width | content                                               |
//! |------------|-------|-------------------------------------------------------|
//! | `ROOT`     | 4     | yaw rate (rad/s), local x/z velocity (m/s), height (m) |
//! | `POSITION` | 63    | non-root joint positions in the root facing frame     |
//! | `ROTATION` | 126   | non-root bone rotations, 6D (first two matrix columns) |
//! | `VELOCITY` | 66    | all joint velocities in the root facing frame (m/s)  |
//! | `CONTACT`  | 4     | binary heel/toe contacts                              |
//!
//! Velocities use backward differences scaled by fps; frame 0 repeats frame 1.
//! Decoding starts the root at the XZ origin facing +Z, so
//! `decode(encode(p)) == p` for motions already in that canonical frame.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::skeleton::{yaw_rotation, Skeleton, JOINT_COUNT};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FPS: f64 = 20.0;
pub const FEATURE_WIDTH: usize = 263;
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 1e-3;

pub const ROOT: Range<usize> = 0..4;
pub const POSITION: Range<usize> = 4..67;
pub const ROTATION: Range<usize> = 67..193;
pub const VELOCITY: Range<usize> = 193..259;
pub const CONTACT: Range<usize> = 259..263;

/// Global joint positions of a clip, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPositions {
    pub fps: f64,
    /// `frames[t][j]`
    pub frames: Vec<Vec<Vector3<f64>>>,
    pub root_yaw: Vec<f64>,
}

impl JointPositions {
    pub fn new(fps: f64, frames: Vec<Vec<Vector3<f64>>>, root_yaw: Vec<f64>) -> Result<Self> {
        if frames.len() != root_yaw.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} yaw values",
                frames.len(),
                root_yaw.len()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(JointPositions {
            fps,
            frames,
            root_yaw,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn all_finite(&self) -> bool {
        self.frames.iter().flatten().all(|p| p.iter().all(|x| x.is_finite()))
            && self.root_yaw.iter().all(|y| y.is_finite())
    }

    pub fn max_joint_error(&self, other: &JointPositions) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).norm()))
            .fold(0.0, f64::max)
    }

    /// Largest relative deviation of any bone from its rest length.
    pub fn bone_length_drift(&self, skeleton: &Skeleton) -> f64 {
        let rest = skeleton.bone_lengths();
        self.frames
            .iter()
            .flat_map(|f| {
                (1..f.len()).map(|j| {
                    let p = skeleton.parent(j).expect("non-root");
                    ((f[j] - f[p]).norm() - rest[j - 1]).abs() / rest[j - 1]
                })
            })
            .fold(0.0, f64::max)
    }

    /// Same clip moved so frame 0 has its root over the origin facing +Z.
    pub fn canonicalize(&self) -> JointPositions {
        let Some(first) = self.frames.first() else {
            return self.clone();
        };
        let yaw0 = self.root_yaw[0];
        let inv = yaw_rotation(-yaw0);
        let origin = Vector3::new(first[0].x, 0.0, first[0].z);
        let frames = self
            .frames
            .iter()
            .map(|f| f.iter().map(|p| inv * (p - origin)).collect())
            .collect();
        let root_yaw = self.root_yaw.iter().map(|y| y - yaw0).collect();
        JointPositions {
            fps: self.fps,
            frames,
            root_yaw,
        }
    }
}

/// A clip in feature form: `T × 263` at `fps`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSeq {
    pub fps: f64,
    pub features: Tensor,
}

impl MotionSeq {
    pub fn new(fps: f64, features: Tensor) -> Result<Self> {
        let (_, w) = features.dims2()?;
        if w != FEATURE_WIDTH {
            return Err(Error::shape("motion features", features.shape(), &[0, FEATURE_WIDTH]));
        }
        Ok(MotionSeq { fps, features })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }

    pub fn contacts(&self) -> Vec<[f64; 4]> {
        (0..self.frames())
            .map(|t| self.frame(t)[CONTACT].try_into().expect("4 contacts"))
            .collect()
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

fn to_local(yaw: f64, v: Vector3<f64>) -> Vector3<f64> {
    yaw_rotation(-yaw) * v
}

/// Shortest-arc rotation taking the direction of `from` onto that of `to`.
fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Rotation3<f64> {
    let (Some(a), Some(b)) = (from.try_normalize(1e-12), to.try_normalize(1e-12)) else {
        return Rotation3::identity();
    };
    let w = 1.0 + a.dot(&b);
    let q = if w < 1e-9 {
        // Antiparallel: half turn about any axis perpendicular to `a`.
        let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let axis = a.cross(&helper).normalize();
        Quaternion::new(0.0, axis.x, axis.y, axis.z)
    } else {
        let c = a.cross(&b);
        Quaternion::new(w, c.x, c.y, c.z)
    };
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

/// 1 where the squared per-frame displacement of each foot joint is below
/// `threshold` (m²/frame²), else 0. Frame 0 repeats frame 1.
pub fn foot_contacts(positions: &JointPositions, skeleton: &Skeleton, threshold: f64) -> Vec<[bool; 4]> {
    let frames = &positions.frames;
    let n = frames.len();
    let mut out = Vec::with_capacity(n);
    for t in 1..n {
        let mut c = [false; 4];
        for (slot, &j) in c.iter_mut().zip(&skeleton.feet) {
            *slot = (frames[t][j] - frames[t - 1][j]).norm_squared() < threshold;
        }
        out.push(c);
    }
    if let Some(&first) = out.first() {
        out.insert(0, first);
    } else if n == 1 {
        out.push([true; 4]);
    }
    out
}

/// Positions to features.
pub fn encode(positions: &JointPositions, skeleton: &Skeleton, contact_threshold: f64) -> Result<MotionSeq> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::invalid(format!("encode needs at least 2 frames, got {n}")));
    }
    if positions.frames.iter().any(|f| f.len() != JOINT_COUNT) || skeleton.joint_count() != JOINT_COUNT {
        return Err(Error::invalid(format!("encode needs {JOINT_COUNT} joints")));
    }
    let fps = positions.fps;
    let frames = &positions.frames;
    let yaw = &positions.root_yaw;
    let contacts = foot_contacts(positions, skeleton, contact_threshold);

    let mut data = vec![0.0; n * FEATURE_WIDTH];
    for t in 0..n {
        // Backward differences; frame 0 borrows frame 1.
        let d = t.max(1);
        let row = &mut data[t * FEATURE_WIDTH..(t + 1) * FEATURE_WIDTH];
        let root = frames[t][0];
        let root_step = frames[d][0] - frames[d - 1][0];
        let v_root = to_local(yaw[d - 1], Vector3::new(root_step.x, 0.0, root_step.z)) * fps;
        row[0] = wrap_angle(yaw[d] - yaw[d - 1]) * fps;
        row[1] = v_root.x;
        row[2] = v_root.z;
        row[3] = root.y;

        let ground = Vector3::new(root.x, 0.0, root.z);
        for j in 1..JOINT_COUNT {
            let local = to_local(yaw[t], frames[t][j] - ground);
            let o = POSITION.start + 3 * (j - 1);
            row[o..o + 3].copy_from_slice(local.as_slice());

            let p = skeleton.parent(j).expect("non-root");
            let bone = to_local(yaw[t], frames[t][j] - frames[t][p]);
            let r = rotation_between(&skeleton.offset(j), &bone);
            let m = r.matrix();
            let o = ROTATION.start + 6 * (j - 1);
            row[o..o + 6].copy_from_slice(&[m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]);
        }
        for j in 0..JOINT_COUNT {
            let v = to_local(yaw[t], frames[d][j] - frames[d - 1][j]) * fps;
            let o = VELOCITY.start + 3 * j;
            row[o..o + 3].copy_from_slice(v.as_slice());
        }
        for (k, &c) in contacts[t].iter().enumerate() {
            row[CONTACT.start + k] = if c { 1.0 } else { 0.0 };
        }
    }
    let features = Tensor::new(&[n, FEATURE_WIDTH], data)?;
    if !features.all_finite() {
        return Err(Error::NonFinite("encode"));
    }
    MotionSeq::new(fps, features)
}

/// Features to positions: integrates root yaw rate and velocity from the
/// origin, then places joints from the root-space position channels.
pub fn decode(m: &MotionSeq, skeleton: &Skeleton) -> Result<JointPositions> {
    let (n, w) = m.features.dims2()?;
    if w != FEATURE_WIDTH {
        return Err(Error::shape("decode", m.features.shape(), &[n, FEATURE_WIDTH]));
    }
    if skeleton.joint_count() != JOINT_COUNT {
        return Err(Error::invalid("decode needs a 22-joint skeleton"));
    }
    let fps = m.fps;
    let mut frames = Vec::with_capacity(n);
    let mut yaws = Vec::with_capacity(n);
    let (mut yaw, mut x, mut z) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..n {
        let row = m.frame(t);
        if t > 0 {
            let step = yaw_rotation(yaw) * Vector3::new(row[1], 0.0, row[2]) / fps;
            x += step.x;
            z += step.z;
            yaw += row[0] / fps;
        }
        let ground = Vector3::new(x, 0.0, z);
        let facing = yaw_rotation(yaw);
        let mut joints = Vec::with_capacity(JOINT_COUNT);
        joints.push(Vector3::new(x, row[3], z));
        for j in 1..JOINT_COUNT {
            let o = POSITION.start + 3 * (j - 1);
            let local = Vector3::new(row[o], row[o + 1], row[o + 2]);
            joints.push(ground + facing * local);
        }
        frames.push(joints);
        yaws.push(yaw);
    }
    JointPositions::new(fps, frames, yaws)
}
