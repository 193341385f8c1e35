//! Procedural motion clips built by forward kinematics on the skeleton.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Vector3};

use super::codec::JointPositions;
use super::skeleton::{joint, Skeleton};

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Arms lowered from the T-pose by `drop` radians.
fn arms_down(local: &mut [Rotation3<f64>], drop: f64) {
    local[joint::L_SHOULDER] = rz(-drop);
    local[joint::R_SHOULDER] = rz(drop);
}

/// Rest pose held for `frames` frames.
pub fn static_pose(skeleton: &Skeleton, frames: usize, fps: f64) -> JointPositions {
    let pose = skeleton.rest_pose();
    JointPositions {
        fps,
        frames: vec![pose; frames],
        root_yaw: vec![0.0; frames],
    }
}

/// Walking at `speed` m/s while turning at `turn_rate` rad/s; starts at the
/// origin facing +Z.
pub fn walk_cycle(skeleton: &Skeleton, frames: usize, fps: f64, speed: f64, turn_rate: f64) -> JointPositions {
    Style::Walk.generate(
        skeleton,
        frames,
        fps,
        &StyleParams {
            speed,
            turn_rate,
            ..StyleParams::default()
        },
    )
}

/// Motion families for the synthetic datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Walk,
    Wave,
    Jump,
    /// Arm circles that halt exactly on every beat.
    Dance,
}

impl Style {
    /// Style named by a keyword in `label`, if any.
    pub fn from_label(label: &str) -> Option<Style> {
        let l = label.to_lowercase();
        [
            ("walk", Style::Walk),
            ("wave", Style::Wave),
            ("jump", Style::Jump),
            ("danc", Style::Dance),
        ]
        .into_iter()
        .find_map(|(k, s)| l.contains(k).then_some(s))
    }

    pub fn fallback(index: usize) -> Style {
        [Style::Walk, Style::Wave, Style::Jump][index % 3]
    }

    pub fn is_beat_locked(self) -> bool {
        self == Style::Dance
    }

    pub fn generate(self, skeleton: &Skeleton, frames: usize, fps: f64, p: &StyleParams) -> JointPositions {
        let n = skeleton.joint_count();
        let rest_root = skeleton.offset(joint::PELVIS);
        let mut out = Vec::with_capacity(frames);
        let mut yaws = Vec::with_capacity(frames);
        for k in 0..frames {
            let t = k as f64 / fps;
            let mut local = vec![Rotation3::identity(); n];
            let mut root = rest_root;
            let mut yaw = 0.0;
            match self {
                Style::Walk => {
                    let w = TAU * p.frequency;
                    let s = (w * t + p.phase).sin();
                    let a = 0.45 * p.amplitude;
                    local[joint::L_HIP] = rx(-a * s);
                    local[joint::R_HIP] = rx(a * s);
                    local[joint::L_KNEE] = rx(0.5 * a * (1.0 - (w * t + p.phase).cos()));
                    local[joint::R_KNEE] = rx(0.5 * a * (1.0 + (w * t + p.phase).cos()));
                    arms_down(&mut local, 1.3);
                    local[joint::L_SHOULDER] = rx(a * s) * local[joint::L_SHOULDER];
                    local[joint::R_SHOULDER] = rx(-a * s) * local[joint::R_SHOULDER];
                    yaw = p.turn_rate * t;
                    let (x, z) = if p.turn_rate.abs() < 1e-9 {
                        (0.0, p.speed * t)
                    } else {
                        let r = p.speed / p.turn_rate;
                        (r * (1.0 - yaw.cos()), r * yaw.sin())
                    };
                    root += Vector3::new(x, 0.01 * (1.0 + (2.0 * (w * t + p.phase)).cos()), z);
                }
                Style::Wave => {
                    let w = TAU * p.frequency;
                    arms_down(&mut local, 1.3);
                    local[joint::R_SHOULDER] = rz(-1.25);
                    local[joint::R_ELBOW] = rz(-0.6 * p.amplitude * (w * t + p.phase).sin() - 0.3);
                }
                Style::Jump => {
                    let w = TAU * p.frequency;
                    let c = 0.5 * (1.0 - (w * t + p.phase).cos());
                    root.y += 0.15 * p.amplitude * c;
                    let bend = 0.5 * p.amplitude * (1.0 - c);
                    local[joint::L_HIP] = rx(-bend);
                    local[joint::R_HIP] = rx(-bend);
                    local[joint::L_KNEE] = rx(2.0 * bend);
                    local[joint::R_KNEE] = rx(2.0 * bend);
                    arms_down(&mut local, 1.3 - 1.5 * c * p.amplitude);
                }
                Style::Dance => {
                    let phi = (t - p.beat_offset) * p.bpm / 60.0;
                    // Angular speed 2π(1 - cos 2πφ) vanishes only on beats.
                    let theta = TAU * (phi - (TAU * phi).sin() / TAU);
                    local[joint::L_SHOULDER] = arm_circle(theta, 0.5 * p.amplitude, 0.7, 1.0);
                    local[joint::R_SHOULDER] = arm_circle(theta + PI, 0.5 * p.amplitude, 0.7, -1.0);
                }
            }
            out.push(skeleton.forward_kinematics(root, yaw, &local));
            yaws.push(yaw);
        }
        JointPositions {
            fps,
            frames: out,
            root_yaw: yaws,
        }
    }
}

/// Shoulder rotation spinning the arm by `theta` around its lowered rest
/// direction after tilting it `tilt` radians off that axis, so the elbow
/// and wrist trace circles. `side` is +1 for the left arm, -1 for the right.
fn arm_circle(theta: f64, tilt: f64, drop: f64, side: f64) -> Rotation3<f64> {
    let base = rz(-side * drop);
    let axis = nalgebra::Unit::new_normalize(base * (Vector3::x() * side));
    Rotation3::from_axis_angle(&axis, theta) * rz(-side * tilt) * base
}

/// Per-clip parameters of a [`Style`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleParams {
    pub amplitude: f64,
    /// Cycles per second for the periodic styles.
    pub frequency: f64,
    pub phase: f64,
    pub speed: f64,
    pub turn_rate: f64,
    pub bpm: f64,
    /// Time of the first beat, seconds.
    pub beat_offset: f64,
}

impl Default for StyleParams {
    fn default() -> Self {
        StyleParams {
            amplitude: 1.0,
            frequency: 0.9,
            phase: 0.0,
            speed: 1.2,
            turn_rate: 0.0,
            bpm: 120.0,
            beat_offset: 0.0,
        }
    }
}
