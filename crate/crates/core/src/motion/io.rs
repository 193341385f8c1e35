//! Motion file container, JSON position export and CSV features.
//!
//! Motion file layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "MCMMOT01"
//! version      u32      1
//! fps          f64
//! joint_count  u32
//! frames       u64
//! width        u32      263
//! payload      frames * width f64, row-major
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codec::{JointPositions, MotionSeq, FEATURE_WIDTH};
use super::skeleton::JOINT_COUNT;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{write_atomic, Reader};
use crate::numerics::Tensor;

pub const MOTION_MAGIC: &[u8; 8] = b"MCMMOT01";
pub const MOTION_VERSION: u32 = 1;

pub fn motion_to_bytes(m: &MotionSeq) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + m.features.len() * 8);
    out.extend_from_slice(MOTION_MAGIC);
    out.extend_from_slice(&MOTION_VERSION.to_le_bytes());
    out.extend_from_slice(&m.fps.to_le_bytes());
    out.extend_from_slice(&(JOINT_COUNT as u32).to_le_bytes());
    out.extend_from_slice(&(m.frames() as u64).to_le_bytes());
    out.extend_from_slice(&(FEATURE_WIDTH as u32).to_le_bytes());
    for &x in m.features.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn motion_from_bytes(bytes: &[u8]) -> Result<MotionSeq> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MOTION_MAGIC {
        return Err(Error::Format("not a motion file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MOTION_VERSION {
        return Err(Error::Format(format!("unsupported motion file version {version}")));
    }
    let fps = r.f64()?;
    let joints = r.u32()? as usize;
    let frames = r.u64()? as usize;
    let width = r.u32()? as usize;
    if joints != JOINT_COUNT || width != FEATURE_WIDTH {
        return Err(Error::Format(format!("expected {JOINT_COUNT} joints / width {FEATURE_WIDTH}, got {joints} / {width}")));
    }
    let data = (0..frames * width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in motion file".into()));
    }
    MotionSeq::new(fps, Tensor::new(&[frames, width], data)?)
}

pub fn save_motion(path: &Path, m: &MotionSeq) -> Result<()> {
    write_atomic(path, &motion_to_bytes(m))
}

pub fn load_motion(path: &Path) -> Result<MotionSeq> {
    motion_from_bytes(&std::fs::read(path)?)
}

/// JSON document for external viewers.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PositionsJson {
    pub fps: f64,
    pub joint_count: usize,
    pub frames: usize,
    pub parents: Vec<i32>,
    pub root_yaw: Vec<f64>,
    /// `positions[t][j] = [x, y, z]`
    pub positions: Vec<Vec<[f64; 3]>>,
}

pub fn positions_json(p: &JointPositions, parents: &[i32]) -> String {
    let doc = PositionsJson {
        fps: p.fps,
        joint_count: p.joint_count(),
        frames: p.len(),
        parents: parents.to_vec(),
        root_yaw: p.root_yaw.clone(),
        positions: p
            .frames
            .iter()
            .map(|f| f.iter().map(|v| [v.x, v.y, v.z]).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("positions serialise")
}

/// Features as CSV with an `f0..f262` header.
pub fn features_csv(m: &MotionSeq) -> String {
    let mut s = (0..FEATURE_WIDTH).map(|i| format!("f{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for t in 0..m.frames() {
        let row = m.frame(t);
        for (i, x) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{x}").expect("string write");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{encode, synth, Skeleton, DEFAULT_CONTACT_THRESHOLD, FPS};

    fn sample() -> (JointPositions, MotionSeq) {
        let sk = Skeleton::smpl22();
        let p = synth::walk_cycle(&sk, 8, FPS, 1.0, 0.2);
        let m = encode(&p, &sk, DEFAULT_CONTACT_THRESHOLD).unwrap();
        (p, m)
    }

    #[test]
    fn motion_file_round_trip_is_bit_exact() {
        let (_, m) = sample();
        let bytes = motion_to_bytes(&m);
        assert_eq!(bytes.len(), 36 + 8 * 263 * 8);
        assert_eq!(motion_from_bytes(&bytes).unwrap(), m);
        assert!(motion_from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn json_export_parses() {
        let (p, _) = sample();
        let sk = Skeleton::smpl22();
        let doc: PositionsJson = serde_json::from_str(&positions_json(&p, &sk.parents)).unwrap();
        assert_eq!(doc.frames, 8);
        assert_eq!(doc.positions[3][5], [p.frames[3][5].x, p.frames[3][5].y, p.frames[3][5].z]);
    }

    #[test]
    fn csv_shape() {
        let (_, m) = sample();
        let csv = features_csv(&m);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[1].split(',').count(), 263);
    }
}
