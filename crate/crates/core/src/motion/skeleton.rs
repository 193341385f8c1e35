use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 22;

/// SMPL joint indices used by name elsewhere.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const L_FOOT: usize = 10;
    pub const R_FOOT: usize = 11;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
}

/// Kinematic tree of the first 22 SMPL joints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Parent per joint; `-1` marks the root.
    pub parents: Vec<i32>,
    /// Rest-pose offset from the parent, meters. The root entry is its rest
    /// position.
    pub offsets: Vec<[f64; 3]>,
    /// Heel/toe joints whose speeds drive the contact channels, ordered
    /// left heel, left toe, right heel, right toe.
    pub feet: [usize; 4],
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::smpl22()
    }
}

impl Skeleton {
    /// T-pose with arms horizontal; toes touch y = 0.
    pub fn smpl22() -> Self {
        let parents = vec![-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19];
        let offsets = vec![
            [0.0, 0.93, 0.0],
            [0.06, -0.09, 0.0],
            [-0.06, -0.09, 0.0],
            [0.0, 0.11, -0.02],
            [0.04, -0.38, 0.0],
            [-0.04, -0.38, 0.0],
            [0.0, 0.13, 0.0],
            [-0.01, -0.40, -0.04],
            [0.01, -0.40, -0.04],
            [0.0, 0.05, 0.02],
            [0.04, -0.06, 0.12],
            [-0.04, -0.06, 0.12],
            [0.0, 0.21, -0.03],
            [0.08, 0.11, -0.02],
            [-0.08, 0.11, -0.02],
            [0.0, 0.09, 0.05],
            [0.12, 0.04, -0.01],
            [-0.12, 0.04, -0.01],
            [0.26, 0.0, -0.02],
            [-0.26, 0.0, -0.02],
            [0.25, 0.0, 0.0],
            [-0.25, 0.0, 0.0],
        ];
        Skeleton {
            parents,
            offsets,
            feet: [joint::L_ANKLE, joint::L_FOOT, joint::R_ANKLE, joint::R_FOOT],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        usize::try_from(self.parents[j]).ok()
    }

    pub fn offset(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.offsets[j])
    }

    /// Root first, every parent listed before its children, all offsets finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n != JOINT_COUNT || self.offsets.len() != n {
            return Err(Error::Config(format!(
                "skeleton needs {JOINT_COUNT} joints with offsets, got {n} parents and {} offsets",
                self.offsets.len()
            )));
        }
        if self.parents[0] != -1 {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Config(format!("joint {j} has parent {p}; parents must precede children")));
            }
        }
        if self.offsets.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite skeleton offset".into()));
        }
        if self.feet.iter().any(|&f| f >= n) {
            return Err(Error::Config("foot joint index out of range".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Skeleton = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("skeleton serialises")
    }

    /// Global joint positions from local joint rotations.
    ///
    /// `local[0]` is the root orientation below the yaw; the root sits at
    /// `root` and faces `yaw` about +Y.
    pub fn forward_kinematics(
        &self,
        root: Vector3<f64>,
        yaw: f64,
        local: &[Rotation3<f64>],
    ) -> Vec<Vector3<f64>> {
        let n = self.joint_count();
        let mut global_rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        global_rot.push(yaw_rotation(yaw) * local[0]);
        pos.push(root);
        for j in 1..n {
            let p = self.parent(j).expect("non-root has a parent");
            let gp: Rotation3<f64> = global_rot[p];
            pos.push(pos[p] + gp * self.offset(j));
            global_rot.push(gp * local[j]);
        }
        pos
    }

    /// Rest pose standing at the origin, facing +Z.
    pub fn rest_pose(&self) -> Vec<Vector3<f64>> {
        let ident = vec![Rotation3::identity(); self.joint_count()];
        self.forward_kinematics(self.offset(0), 0.0, &ident)
    }

    pub fn bone_lengths(&self) -> Vec<f64> {
        (1..self.joint_count()).map(|j| self.offset(j).norm()).collect()
    }
}

/// Rotation about +Y by `yaw` radians; yaw 0 faces +Z.
pub fn yaw_rotation(yaw: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
}
