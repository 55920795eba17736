//! Skeleton definition and the channel layout of the motion representations.
//!
//! The per-frame channel order is normative: masks, observation specs and the
//! denoiser all index into it. For a skeleton with `j` joints the layout is
//!
//! ```text
//! [r_a | r_x r_z | r_y | j_p (j-1 joints x 3) | j_r (j x 6) | j_v (j x 3) | c_f (4)]
//! ```
//!
//! The simplified representation is the strict prefix ending after `j_p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTROLLABLE_JOINT_COUNT: usize = 6;
pub const FOOT_CONTACT_CHANNELS: usize = 4;

/// A kinematic skeleton. Pelvis (the root) is index 0 by convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub name: String,
    pub joint_names: Vec<String>,
    /// Parent joint index per joint; the root's parent is itself.
    pub parents: Vec<usize>,
    /// Six controllable joints in the fixed order:
    /// pelvis, left foot, right foot, head, left wrist, right wrist.
    pub controllable_joints: [usize; CONTROLLABLE_JOINT_COUNT],
    /// Joints used for the four foot-contact labels (left heel, left toe,
    /// right heel, right toe; a toy skeleton may repeat whole-foot joints).
    pub heel_toe_joints: [usize; FOOT_CONTACT_CHANNELS],
    /// Rest-pose offset of each joint from its parent, meters.
    pub rest_offsets: Vec<[f64; 3]>,
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j < CONTROLLABLE_JOINT_COUNT {
            return Err(Error::Config(format!(
                "skeleton needs at least {CONTROLLABLE_JOINT_COUNT} joints, got {j}"
            )));
        }
        if self.parents.len() != j || self.rest_offsets.len() != j {
            return Err(Error::Config(
                "parents/rest_offsets length must match joint count".into(),
            ));
        }
        if self.parents[0] != 0 {
            return Err(Error::Config("root joint must be its own parent".into()));
        }
        for (i, &p) in self.parents.iter().enumerate().skip(1) {
            if p >= i {
                return Err(Error::Config(format!(
                    "joint {i} must have a parent with a smaller index, got {p}"
                )));
            }
        }
        let mut seen = vec![false; j];
        for &c in &self.controllable_joints {
            if c >= j {
                return Err(Error::Config(format!("controllable joint {c} out of range")));
            }
            if seen[c] {
                return Err(Error::Config(format!("controllable joint {c} repeated")));
            }
            seen[c] = true;
        }
        if self.controllable_joints[0] != 0 {
            return Err(Error::Config("first controllable joint must be the pelvis".into()));
        }
        for &h in &self.heel_toe_joints {
            if h >= j {
                return Err(Error::Config(format!("heel/toe joint {h} out of range")));
            }
        }
        Ok(())
    }

    /// Look up a joint index by name.
    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Joints considered part of the torso for the ablation that passes extra
    /// joints to the second stage.
    pub fn torso_joints(&self) -> Vec<usize> {
        self.joint_names
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.as_str(), "spine" | "neck"))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout::new(self.joint_count())
    }
}

/// The default eight-joint desk-scale skeleton.
pub fn toy_skeleton() -> Skeleton {
    let skeleton = Skeleton {
        name: "toy8".into(),
        joint_names: vec![
            "pelvis".into(),
            "spine".into(),
            "neck".into(),
            "head".into(),
            "left_wrist".into(),
            "right_wrist".into(),
            "left_foot".into(),
            "right_foot".into(),
        ],
        parents: vec![0, 0, 1, 2, 2, 2, 0, 0],
        // pelvis, left foot, right foot, head, left wrist, right wrist
        controllable_joints: [0, 6, 7, 3, 4, 5],
        heel_toe_joints: [6, 6, 7, 7],
        rest_offsets: vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.15, 0.0],
            [0.35, 0.05, 0.0],
            [-0.35, 0.05, 0.0],
            [0.12, -0.9, 0.0],
            [-0.12, -0.9, 0.0],
        ],
    };
    skeleton.validate().expect("builtin skeleton is valid");
    skeleton
}

/// Column offsets of each channel group within a per-frame row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub joint_count: usize,
}

impl ChannelLayout {
    pub fn new(joint_count: usize) -> Self {
        Self { joint_count }
    }

    pub const ROOT_ANGULAR: usize = 0;
    pub const ROOT_LINEAR_X: usize = 1;
    pub const ROOT_LINEAR_Z: usize = 2;
    pub const ROOT_HEIGHT: usize = 3;
    pub const ROOT_CHANNELS: usize = 4;

    pub fn jp_start(&self) -> usize {
        Self::ROOT_CHANNELS
    }

    /// Column of the x coordinate of a non-root joint's local position.
    pub fn jp_col(&self, joint: usize) -> usize {
        debug_assert!(joint >= 1 && joint < self.joint_count);
        self.jp_start() + (joint - 1) * 3
    }

    pub fn jr_start(&self) -> usize {
        self.jp_start() + (self.joint_count - 1) * 3
    }

    pub fn jr_col(&self, joint: usize) -> usize {
        self.jr_start() + joint * 6
    }

    pub fn jv_start(&self) -> usize {
        self.jr_start() + self.joint_count * 6
    }

    pub fn jv_col(&self, joint: usize) -> usize {
        self.jv_start() + joint * 3
    }

    pub fn cf_start(&self) -> usize {
        self.jv_start() + self.joint_count * 3
    }

    /// Channel count of the simplified representation.
    pub fn simplified_channels(&self) -> usize {
        Self::ROOT_CHANNELS + (self.joint_count - 1) * 3
    }

    /// Channel count of the redundant representation.
    pub fn redundant_channels(&self) -> usize {
        self.cf_start() + FOOT_CONTACT_CHANNELS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_skeleton_is_valid() {
        let s = toy_skeleton();
        assert_eq!(s.joint_count(), 8);
        assert_eq!(s.controllable_joints[0], 0);
        assert_eq!(s.joint_index("head"), Some(3));
    }

    #[test]
    fn layout_offsets_are_contiguous() {
        let l = ChannelLayout::new(8);
        assert_eq!(l.simplified_channels(), 4 + 7 * 3);
        assert_eq!(l.jr_start(), l.simplified_channels());
        assert_eq!(l.jv_start(), l.jr_start() + 8 * 6);
        assert_eq!(l.cf_start(), l.jv_start() + 8 * 3);
        assert_eq!(l.redundant_channels(), l.cf_start() + 4);
        assert_eq!(l.jp_col(1), 4);
        assert_eq!(l.jp_col(7), 4 + 6 * 3);
    }

    #[test]
    fn invalid_skeletons_are_rejected() {
        let mut s = toy_skeleton();
        s.controllable_joints[1] = 0;
        assert!(s.validate().is_err());

        let mut s = toy_skeleton();
        s.parents[3] = 5;
        assert!(s.validate().is_err());
    }
}
