//! Motion representations and the local-to-global conversion.
//!
//! Motions are stored structurally here and flattened to `frames x channels`
//! tensors (see [`ChannelLayout`]) for diffusion, masking and guidance. The
//! conversion `to_global` integrates root yaw and root velocity and places
//! every joint in world coordinates; its vector-Jacobian product
//! [`to_global_vjp`] is what trajectory guidance backpropagates through.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{ChannelLayout, Skeleton, FOOT_CONTACT_CHANNELS};

/// Full redundant per-frame representation:
/// root angular velocity, root linear velocity, root height, local joint
/// positions, 6D joint rotations, local joint velocities, foot contacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantMotion {
    /// F scalars, radians/frame.
    pub r_a: Array1<f64>,
    /// F x 2, meters/frame in the root-facing frame.
    pub r_xz: Array2<f64>,
    /// F scalars, meters.
    pub r_y: Array1<f64>,
    /// F x (j-1) x 3 local positions of non-root joints, root-facing frame.
    pub j_p: Array3<f64>,
    /// F x j x 6 joint rotations in continuous 6D form.
    pub j_r: Array3<f64>,
    /// F x j x 3 local joint velocities, meters/frame.
    pub j_v: Array3<f64>,
    /// F x 4 binary foot-contact labels.
    pub c_f: Array2<f64>,
}

/// The simplified representation used by the trajectory-control stage:
/// the redundant tuple with rotations, velocities and contacts discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplifiedMotion {
    pub r_a: Array1<f64>,
    pub r_xz: Array2<f64>,
    pub r_y: Array1<f64>,
    pub j_p: Array3<f64>,
}

/// World-coordinate joint positions plus the integrated heading.
#[derive(Debug, Clone)]
pub struct GlobalMotion {
    /// F x j x 3 world positions, meters.
    pub positions: Array3<f64>,
    /// F radians, root_yaw[0] = 0.
    pub root_yaw: Array1<f64>,
}

impl GlobalMotion {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.positions.shape()[1]
    }
}

impl RedundantMotion {
    pub fn frames(&self) -> usize {
        self.r_a.len()
    }

    pub fn zeros(frames: usize, joint_count: usize) -> Self {
        Self {
            r_a: Array1::zeros(frames),
            r_xz: Array2::zeros((frames, 2)),
            r_y: Array1::zeros(frames),
            j_p: Array3::zeros((frames, joint_count - 1, 3)),
            j_r: Array3::zeros((frames, joint_count, 6)),
            j_v: Array3::zeros((frames, joint_count, 3)),
            c_f: Array2::zeros((frames, FOOT_CONTACT_CHANNELS)),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.j_p.shape()[1] + 1
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.frames();
        let j = self.joint_count();
        let shapes_ok = self.r_xz.shape() == [f, 2]
            && self.r_y.len() == f
            && self.j_p.shape() == [f, j - 1, 3]
            && self.j_r.shape() == [f, j, 6]
            && self.j_v.shape() == [f, j, 3]
            && self.c_f.shape() == [f, FOOT_CONTACT_CHANNELS];
        if !shapes_ok {
            return Err(Error::Representation(
                "channel arrays disagree on frame or joint count".into(),
            ));
        }
        if self.c_f.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Representation("foot-contact labels must be binary".into()));
        }
        let finite = self.r_a.iter().all(|v| v.is_finite())
            && self.r_xz.iter().all(|v| v.is_finite())
            && self.r_y.iter().all(|v| v.is_finite())
            && self.j_p.iter().all(|v| v.is_finite())
            && self.j_r.iter().all(|v| v.is_finite())
            && self.j_v.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Representation("non-finite values in motion".into()));
        }
        Ok(())
    }

    /// Flatten to a `frames x redundant_channels` tensor.
    pub fn to_tensor(&self) -> Array2<f64> {
        let f = self.frames();
        let j = self.joint_count();
        let layout = ChannelLayout::new(j);
        let mut x = Array2::zeros((f, layout.redundant_channels()));
        for i in 0..f {
            x[[i, ChannelLayout::ROOT_ANGULAR]] = self.r_a[i];
            x[[i, ChannelLayout::ROOT_LINEAR_X]] = self.r_xz[[i, 0]];
            x[[i, ChannelLayout::ROOT_LINEAR_Z]] = self.r_xz[[i, 1]];
            x[[i, ChannelLayout::ROOT_HEIGHT]] = self.r_y[i];
            for k in 1..j {
                for d in 0..3 {
                    x[[i, layout.jp_col(k) + d]] = self.j_p[[i, k - 1, d]];
                }
            }
            for k in 0..j {
                for d in 0..6 {
                    x[[i, layout.jr_col(k) + d]] = self.j_r[[i, k, d]];
                }
                for d in 0..3 {
                    x[[i, layout.jv_col(k) + d]] = self.j_v[[i, k, d]];
                }
            }
            for d in 0..FOOT_CONTACT_CHANNELS {
                x[[i, layout.cf_start() + d]] = self.c_f[[i, d]];
            }
        }
        x
    }

    pub fn from_tensor(x: ArrayView2<f64>, joint_count: usize) -> Result<Self> {
        let layout = ChannelLayout::new(joint_count);
        if x.ncols() != layout.redundant_channels() {
            return Err(Error::Shape(format!(
                "expected {} redundant channels, got {}",
                layout.redundant_channels(),
                x.ncols()
            )));
        }
        let f = x.nrows();
        let j = joint_count;
        let mut m = Self::zeros(f, j);
        for i in 0..f {
            m.r_a[i] = x[[i, ChannelLayout::ROOT_ANGULAR]];
            m.r_xz[[i, 0]] = x[[i, ChannelLayout::ROOT_LINEAR_X]];
            m.r_xz[[i, 1]] = x[[i, ChannelLayout::ROOT_LINEAR_Z]];
            m.r_y[i] = x[[i, ChannelLayout::ROOT_HEIGHT]];
            for k in 1..j {
                for d in 0..3 {
                    m.j_p[[i, k - 1, d]] = x[[i, layout.jp_col(k) + d]];
                }
            }
            for k in 0..j {
                for d in 0..6 {
                    m.j_r[[i, k, d]] = x[[i, layout.jr_col(k) + d]];
                }
                for d in 0..3 {
                    m.j_v[[i, k, d]] = x[[i, layout.jv_col(k) + d]];
                }
            }
            for d in 0..FOOT_CONTACT_CHANNELS {
                m.c_f[[i, d]] = x[[i, layout.cf_start() + d]];
            }
        }
        Ok(m)
    }

    pub fn to_global(&self, skeleton: &Skeleton) -> Result<GlobalMotion> {
        let x = self.to_tensor();
        to_global_channels(x.view(), skeleton)
    }
}

impl SimplifiedMotion {
    pub fn frames(&self) -> usize {
        self.r_a.len()
    }

    pub fn joint_count(&self) -> usize {
        self.j_p.shape()[1] + 1
    }

    pub fn zeros(frames: usize, joint_count: usize) -> Self {
        Self {
            r_a: Array1::zeros(frames),
            r_xz: Array2::zeros((frames, 2)),
            r_y: Array1::zeros(frames),
            j_p: Array3::zeros((frames, joint_count - 1, 3)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.frames();
        let j = self.joint_count();
        if self.r_xz.shape() != [f, 2] || self.r_y.len() != f || self.j_p.shape() != [f, j - 1, 3] {
            return Err(Error::Representation(
                "channel arrays disagree on frame or joint count".into(),
            ));
        }
        Ok(())
    }

    /// Flatten to a `frames x simplified_channels` tensor (the strict prefix
    /// of the redundant layout).
    pub fn to_tensor(&self) -> Array2<f64> {
        let f = self.frames();
        let j = self.joint_count();
        let layout = ChannelLayout::new(j);
        let mut x = Array2::zeros((f, layout.simplified_channels()));
        for i in 0..f {
            x[[i, ChannelLayout::ROOT_ANGULAR]] = self.r_a[i];
            x[[i, ChannelLayout::ROOT_LINEAR_X]] = self.r_xz[[i, 0]];
            x[[i, ChannelLayout::ROOT_LINEAR_Z]] = self.r_xz[[i, 1]];
            x[[i, ChannelLayout::ROOT_HEIGHT]] = self.r_y[i];
            for k in 1..j {
                for d in 0..3 {
                    x[[i, layout.jp_col(k) + d]] = self.j_p[[i, k - 1, d]];
                }
            }
        }
        x
    }

    pub fn from_tensor(x: ArrayView2<f64>, joint_count: usize) -> Result<Self> {
        let layout = ChannelLayout::new(joint_count);
        if x.ncols() != layout.simplified_channels() {
            return Err(Error::Shape(format!(
                "expected {} simplified channels, got {}",
                layout.simplified_channels(),
                x.ncols()
            )));
        }
        let f = x.nrows();
        let mut m = Self::zeros(f, joint_count);
        for i in 0..f {
            m.r_a[i] = x[[i, ChannelLayout::ROOT_ANGULAR]];
            m.r_xz[[i, 0]] = x[[i, ChannelLayout::ROOT_LINEAR_X]];
            m.r_xz[[i, 1]] = x[[i, ChannelLayout::ROOT_LINEAR_Z]];
            m.r_y[i] = x[[i, ChannelLayout::ROOT_HEIGHT]];
            for k in 1..joint_count {
                for d in 0..3 {
                    m.j_p[[i, k - 1, d]] = x[[i, layout.jp_col(k) + d]];
                }
            }
        }
        Ok(m)
    }

    pub fn to_global(&self, skeleton: &Skeleton) -> Result<GlobalMotion> {
        let x = self.to_tensor();
        to_global_channels(x.view(), skeleton)
    }

    /// Embed into a redundant motion with zero-filled extra channels.
    pub fn into_redundant_zero_filled(&self) -> RedundantMotion {
        let mut m = RedundantMotion::zeros(self.frames(), self.joint_count());
        m.r_a = self.r_a.clone();
        m.r_xz = self.r_xz.clone();
        m.r_y = self.r_y.clone();
        m.j_p = self.j_p.clone();
        m
    }
}

/// Project a redundant motion onto the simplified channels (bit-exact copy).
pub fn simplified_from_redundant(motion: &RedundantMotion) -> SimplifiedMotion {
    SimplifiedMotion {
        r_a: motion.r_a.clone(),
        r_xz: motion.r_xz.clone(),
        r_y: motion.r_y.clone(),
        j_p: motion.j_p.clone(),
    }
}

#[inline]
fn rot_y(yaw: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x + s * z, -s * x + c * z)
}

/// Derivative of `rot_y` with respect to the yaw angle.
#[inline]
fn rot_y_dtheta(yaw: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (-s * x + c * z, -c * x - s * z)
}

/// Local-to-global conversion over a channel tensor whose columns start with
/// the simplified prefix. Accepts both simplified and redundant tensors.
///
/// Per frame `i`: `root_yaw[i] = sum_{k<i} r_a[k]`,
/// `root_xz[i] = sum_{k<i} RotY(root_yaw[k]) * r_xz[k]`, root height `r_y[i]`,
/// and each non-root joint lands at `RotY(root_yaw[i]) * j_p[i] + root_xz[i]`.
pub fn to_global_channels(x: ArrayView2<f64>, skeleton: &Skeleton) -> Result<GlobalMotion> {
    let j = skeleton.joint_count();
    let layout = skeleton.layout();
    if x.ncols() < layout.simplified_channels() {
        return Err(Error::Shape(format!(
            "tensor has {} channels, needs at least the simplified prefix ({})",
            x.ncols(),
            layout.simplified_channels()
        )));
    }
    let f = x.nrows();
    if f == 0 {
        return Err(Error::Representation("motion must have at least one frame".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to to_global".into()));
    }

    let mut yaw = Array1::zeros(f);
    for i in 1..f {
        yaw[i] = yaw[i - 1] + x[[i - 1, ChannelLayout::ROOT_ANGULAR]];
    }

    let mut root_x = 0.0;
    let mut root_z = 0.0;
    let mut positions = Array3::zeros((f, j, 3));
    for i in 0..f {
        positions[[i, 0, 0]] = root_x;
        positions[[i, 0, 1]] = x[[i, ChannelLayout::ROOT_HEIGHT]];
        positions[[i, 0, 2]] = root_z;
        for k in 1..j {
            let c = layout.jp_col(k);
            let (px, pz) = rot_y(yaw[i], x[[i, c]], x[[i, c + 2]]);
            positions[[i, k, 0]] = root_x + px;
            positions[[i, k, 1]] = x[[i, c + 1]];
            positions[[i, k, 2]] = root_z + pz;
        }
        let (dx, dz) = rot_y(
            yaw[i],
            x[[i, ChannelLayout::ROOT_LINEAR_X]],
            x[[i, ChannelLayout::ROOT_LINEAR_Z]],
        );
        root_x += dx;
        root_z += dz;
    }

    Ok(GlobalMotion { positions, root_yaw: yaw })
}

/// Vector-Jacobian product of [`to_global_channels`]: given the gradient of a
/// scalar with respect to the world positions, return its gradient with
/// respect to the input channels. Columns beyond the simplified prefix get
/// zero gradient (world positions do not depend on them).
pub fn to_global_vjp(
    x: ArrayView2<f64>,
    skeleton: &Skeleton,
    grad_positions: &Array3<f64>,
) -> Result<Array2<f64>> {
    let j = skeleton.joint_count();
    let layout = skeleton.layout();
    let f = x.nrows();
    if grad_positions.shape() != [f, j, 3] {
        return Err(Error::Shape("grad_positions shape mismatch".into()));
    }

    let mut yaw = Array1::<f64>::zeros(f);
    for i in 1..f {
        yaw[i] = yaw[i - 1] + x[[i - 1, ChannelLayout::ROOT_ANGULAR]];
    }

    let mut grad = Array2::zeros((f, x.ncols()));
    // Accumulated gradient w.r.t. the root XZ position at each frame.
    let mut grad_root = Array2::<f64>::zeros((f, 2));
    let mut grad_yaw = Array1::<f64>::zeros(f);

    for i in 0..f {
        grad_root[[i, 0]] += grad_positions[[i, 0, 0]];
        grad_root[[i, 1]] += grad_positions[[i, 0, 2]];
        grad[[i, ChannelLayout::ROOT_HEIGHT]] += grad_positions[[i, 0, 1]];
        for k in 1..j {
            let c = layout.jp_col(k);
            let gx = grad_positions[[i, k, 0]];
            let gy = grad_positions[[i, k, 1]];
            let gz = grad_positions[[i, k, 2]];
            grad_root[[i, 0]] += gx;
            grad_root[[i, 1]] += gz;
            grad[[i, c + 1]] += gy;
            // d(RotY(yaw) p)/dp = RotY(yaw); transpose applied to the cotangent.
            let (s, cth) = yaw[i].sin_cos();
            grad[[i, c]] += cth * gx - s * gz;
            grad[[i, c + 2]] += s * gx + cth * gz;
            let (dx, dz) = rot_y_dtheta(yaw[i], x[[i, c]], x[[i, c + 2]]);
            grad_yaw[i] += gx * dx + gz * dz;
        }
    }

    // root_xz[i] = sum_{k<i} RotY(yaw[k]) r_xz[k]: each step k feeds every
    // frame after it, so accumulate the suffix sum of grad_root.
    let mut suffix = [0.0f64; 2];
    for k in (0..f).rev() {
        if k + 1 < f {
            suffix[0] += grad_root[[k + 1, 0]];
            suffix[1] += grad_root[[k + 1, 1]];
        }
        let vx = x[[k, ChannelLayout::ROOT_LINEAR_X]];
        let vz = x[[k, ChannelLayout::ROOT_LINEAR_Z]];
        let (s, c) = yaw[k].sin_cos();
        grad[[k, ChannelLayout::ROOT_LINEAR_X]] += c * suffix[0] - s * suffix[1];
        grad[[k, ChannelLayout::ROOT_LINEAR_Z]] += s * suffix[0] + c * suffix[1];
        let (dx, dz) = rot_y_dtheta(yaw[k], vx, vz);
        grad_yaw[k] += suffix[0] * dx + suffix[1] * dz;
    }

    // yaw[i] = sum_{k<i} r_a[k]: suffix sum again.
    let mut yaw_suffix = 0.0;
    for k in (0..f).rev() {
        if k + 1 < f {
            yaw_suffix += grad_yaw[k + 1];
        }
        grad[[k, ChannelLayout::ROOT_ANGULAR]] += yaw_suffix;
    }

    Ok(grad)
}

/// Foot-contact labels from world-space heel/toe joints: a label is 1 when
/// the joint's per-frame speed is below `vel_thresh` and its height is below
/// `height_thresh`. Frame 0 copies frame 1.
pub fn derive_foot_contact(
    motion: &GlobalMotion,
    skeleton: &Skeleton,
    vel_thresh: f64,
    height_thresh: f64,
) -> Result<Array2<f64>> {
    if vel_thresh <= 0.0 || height_thresh <= 0.0 {
        return Err(Error::Config("foot-contact thresholds must be positive".into()));
    }
    let f = motion.frames();
    if f < 2 {
        return Err(Error::Representation("foot contact needs at least 2 frames".into()));
    }
    let mut labels = Array2::zeros((f, FOOT_CONTACT_CHANNELS));
    for (ch, &joint) in skeleton.heel_toe_joints.iter().enumerate() {
        for i in 1..f {
            let dx = motion.positions[[i, joint, 0]] - motion.positions[[i - 1, joint, 0]];
            let dy = motion.positions[[i, joint, 1]] - motion.positions[[i - 1, joint, 1]];
            let dz = motion.positions[[i, joint, 2]] - motion.positions[[i - 1, joint, 2]];
            let speed = (dx * dx + dy * dy + dz * dz).sqrt();
            let grounded = speed < vel_thresh && motion.positions[[i, joint, 1]] < height_thresh;
            labels[[i, ch]] = if grounded { 1.0 } else { 0.0 };
        }
        labels[[0, ch]] = labels[[1, ch]];
    }
    Ok(labels)
}

/// On-disk motion schema: named channel arrays plus fps and skeleton name.
#[derive(Debug, Serialize, Deserialize)]
pub struct MotionJson {
    pub fps: u32,
    pub skeleton: String,
    pub channels: BTreeMap<String, serde_json::Value>,
}

fn array3_to_json(a: &Array3<f64>) -> serde_json::Value {
    let v: Vec<Vec<Vec<f64>>> = a
        .axis_iter(Axis(0))
        .map(|fr| fr.axis_iter(Axis(0)).map(|r| r.to_vec()).collect())
        .collect();
    serde_json::to_value(v).expect("nested f64 vectors serialize")
}

fn array2_to_json(a: &Array2<f64>) -> serde_json::Value {
    let v: Vec<Vec<f64>> = a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    serde_json::to_value(v).expect("nested f64 vectors serialize")
}

fn json_to_array1(v: &serde_json::Value) -> Result<Array1<f64>> {
    let data: Vec<f64> = serde_json::from_value(v.clone())?;
    Ok(Array1::from_vec(data))
}

fn json_to_array2(v: &serde_json::Value) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone())?;
    let ncols = rows.first().map_or(0, |r| r.len());
    let mut a = Array2::zeros((rows.len(), ncols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::Data("ragged channel rows".into()));
        }
        for (k, &x) in r.iter().enumerate() {
            a[[i, k]] = x;
        }
    }
    Ok(a)
}

fn json_to_array3(v: &serde_json::Value) -> Result<Array3<f64>> {
    let frames: Vec<Vec<Vec<f64>>> = serde_json::from_value(v.clone())?;
    let d1 = frames.first().map_or(0, |f| f.len());
    let d2 = frames.first().and_then(|f| f.first()).map_or(0, |r| r.len());
    let mut a = Array3::zeros((frames.len(), d1, d2));
    for (i, fr) in frames.iter().enumerate() {
        for (k, r) in fr.iter().enumerate() {
            if r.len() != d2 || fr.len() != d1 {
                return Err(Error::Data("ragged channel array".into()));
            }
            for (d, &x) in r.iter().enumerate() {
                a[[i, k, d]] = x;
            }
        }
    }
    Ok(a)
}

impl RedundantMotion {
    pub fn to_json(&self, fps: u32, skeleton: &Skeleton) -> MotionJson {
        let mut channels = BTreeMap::new();
        channels.insert("r_a".into(), serde_json::to_value(self.r_a.to_vec()).unwrap());
        channels.insert("r_xz".into(), array2_to_json(&self.r_xz));
        channels.insert("r_y".into(), serde_json::to_value(self.r_y.to_vec()).unwrap());
        channels.insert("j_p".into(), array3_to_json(&self.j_p));
        channels.insert("j_r".into(), array3_to_json(&self.j_r));
        channels.insert("j_v".into(), array3_to_json(&self.j_v));
        channels.insert("c_f".into(), array2_to_json(&self.c_f));
        MotionJson { fps, skeleton: skeleton.name.clone(), channels }
    }

    pub fn from_json(doc: &MotionJson) -> Result<Self> {
        let get = |name: &str| {
            doc.channels
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing channel {name}")))
        };
        let m = Self {
            r_a: json_to_array1(get("r_a")?)?,
            r_xz: json_to_array2(get("r_xz")?)?,
            r_y: json_to_array1(get("r_y")?)?,
            j_p: json_to_array3(get("j_p")?)?,
            j_r: json_to_array3(get("j_r")?)?,
            j_v: json_to_array3(get("j_v")?)?,
            c_f: json_to_array2(get("c_f")?)?,
        };
        m.validate()?;
        Ok(m)
    }
}

impl SimplifiedMotion {
    pub fn to_json(&self, fps: u32, skeleton: &Skeleton) -> MotionJson {
        let mut channels = BTreeMap::new();
        channels.insert("r_a".into(), serde_json::to_value(self.r_a.to_vec()).unwrap());
        channels.insert("r_xz".into(), array2_to_json(&self.r_xz));
        channels.insert("r_y".into(), serde_json::to_value(self.r_y.to_vec()).unwrap());
        channels.insert("j_p".into(), array3_to_json(&self.j_p));
        MotionJson { fps, skeleton: skeleton.name.clone(), channels }
    }

    pub fn from_json(doc: &MotionJson) -> Result<Self> {
        let get = |name: &str| {
            doc.channels
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing channel {name}")))
        };
        let m = Self {
            r_a: json_to_array1(get("r_a")?)?,
            r_xz: json_to_array2(get("r_xz")?)?,
            r_y: json_to_array1(get("r_y")?)?,
            j_p: json_to_array3(get("j_p")?)?,
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::toy_skeleton;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_simplified(frames: usize, seed: u64) -> SimplifiedMotion {
        let skel = toy_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = skel.joint_count();
        let mut m = SimplifiedMotion::zeros(frames, j);
        for i in 0..frames {
            m.r_a[i] = rng.gen_range(-0.3..0.3);
            m.r_xz[[i, 0]] = rng.gen_range(-0.2..0.2);
            m.r_xz[[i, 1]] = rng.gen_range(-0.2..0.2);
            m.r_y[i] = rng.gen_range(0.5..1.2);
            for k in 0..j - 1 {
                for d in 0..3 {
                    m.j_p[[i, k, d]] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        m
    }

    /// Brute-force oracle: walk the frames, composing per-frame rotations as
    /// explicit 2x2 matrices. Independent of the implementation's cumulative
    /// sums.
    fn oracle_global(m: &SimplifiedMotion, skel: &Skeleton) -> GlobalMotion {
        let f = m.frames();
        let j = skel.joint_count();
        let mut positions = Array3::zeros((f, j, 3));
        let mut root_yaw = Array1::zeros(f);
        // Heading as an explicit rotation matrix, composed stepwise.
        let mut heading = [[1.0, 0.0], [0.0, 1.0]];
        let mut root = [0.0, 0.0];
        for i in 0..f {
            root_yaw[i] = if i == 0 {
                0.0
            } else {
                root_yaw[i - 1] + m.r_a[i - 1]
            };
            positions[[i, 0, 0]] = root[0];
            positions[[i, 0, 1]] = m.r_y[i];
            positions[[i, 0, 2]] = root[1];
            for k in 1..j {
                let p = [m.j_p[[i, k - 1, 0]], m.j_p[[i, k - 1, 2]]];
                positions[[i, k, 0]] = root[0] + heading[0][0] * p[0] + heading[0][1] * p[1];
                positions[[i, k, 1]] = m.j_p[[i, k - 1, 1]];
                positions[[i, k, 2]] = root[1] + heading[1][0] * p[0] + heading[1][1] * p[1];
            }
            let v = [m.r_xz[[i, 0]], m.r_xz[[i, 1]]];
            root[0] += heading[0][0] * v[0] + heading[0][1] * v[1];
            root[1] += heading[1][0] * v[0] + heading[1][1] * v[1];
            // Compose the per-frame rotation after the step so frame i uses the
            // yaw accumulated before it.
            let (s, c) = m.r_a[i].sin_cos();
            let step = [[c, s], [-s, c]];
            heading = [
                [
                    step[0][0] * heading[0][0] + step[0][1] * heading[1][0],
                    step[0][0] * heading[0][1] + step[0][1] * heading[1][1],
                ],
                [
                    step[1][0] * heading[0][0] + step[1][1] * heading[1][0],
                    step[1][0] * heading[0][1] + step[1][1] * heading[1][1],
                ],
            ];
        }
        GlobalMotion { positions, root_yaw }
    }

    #[test]
    fn straight_walk_integrates_to_line() {
        let skel = toy_skeleton();
        let mut m = SimplifiedMotion::zeros(3, skel.joint_count());
        for i in 0..3 {
            m.r_xz[[i, 0]] = 1.0;
            m.r_y[i] = 0.9;
        }
        let g = m.to_global(&skel).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(g.positions[[i, 0, 0]], i as f64, epsilon = 1e-12);
            assert_abs_diff_eq!(g.positions[[i, 0, 1]], 0.9, epsilon = 1e-12);
            assert_abs_diff_eq!(g.positions[[i, 0, 2]], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_turn_path_matches_rotation_composition() {
        let skel = toy_skeleton();
        let mut m = SimplifiedMotion::zeros(4, skel.joint_count());
        for i in 0..4 {
            m.r_a[i] = std::f64::consts::FRAC_PI_2;
            m.r_xz[[i, 0]] = 1.0;
        }
        let g = m.to_global(&skel).unwrap();
        let o = oracle_global(&m, &skel);
        for i in 0..4 {
            for d in 0..3 {
                assert_abs_diff_eq!(
                    g.positions[[i, 0, d]],
                    o.positions[[i, 0, d]],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn zero_motion_maps_to_origin() {
        let skel = toy_skeleton();
        let m = SimplifiedMotion::zeros(5, skel.joint_count());
        let g = m.to_global(&skel).unwrap();
        assert!(g.positions.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn to_global_matches_oracle_on_random_motions() {
        let skel = toy_skeleton();
        for seed in 0..20 {
            let m = random_simplified(16, seed);
            let g = m.to_global(&skel).unwrap();
            let o = oracle_global(&m, &skel);
            for (a, b) in g.positions.iter().zip(o.positions.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn yaw_is_additive() {
        let skel = toy_skeleton();
        let m = random_simplified(32, 7);
        let g = m.to_global(&skel).unwrap();
        let total: f64 = m.r_a.iter().take(31).sum();
        assert_abs_diff_eq!(g.root_yaw[31], total, epsilon = 1e-12);
    }

    #[test]
    fn translation_consistency_when_prepending_a_straight_frame() {
        let skel = toy_skeleton();
        let base = random_simplified(10, 3);
        let d = 0.7;
        let f = base.frames();
        let mut shifted = SimplifiedMotion::zeros(f + 1, base.joint_count());
        shifted.r_xz[[0, 0]] = d;
        shifted.r_y[0] = base.r_y[0];
        for i in 0..f {
            shifted.r_a[i + 1] = base.r_a[i];
            shifted.r_xz[[i + 1, 0]] = base.r_xz[[i, 0]];
            shifted.r_xz[[i + 1, 1]] = base.r_xz[[i, 1]];
            shifted.r_y[i + 1] = base.r_y[i];
            for k in 0..base.joint_count() - 1 {
                for dd in 0..3 {
                    shifted.j_p[[i + 1, k, dd]] = base.j_p[[i, k, dd]];
                }
            }
        }
        let g0 = base.to_global(&skel).unwrap();
        let g1 = shifted.to_global(&skel).unwrap();
        for i in 0..f {
            for k in 0..base.joint_count() {
                assert_abs_diff_eq!(
                    g1.positions[[i + 1, k, 0]],
                    g0.positions[[i, k, 0]] + d,
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    g1.positions[[i + 1, k, 2]],
                    g0.positions[[i, k, 2]],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let skel = toy_skeleton();
        let m = random_simplified(6, 11);
        let x = m.to_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = m.to_global(&skel).unwrap();
        let cotangent = Array3::from_shape_fn(g.positions.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let analytic = to_global_vjp(x.view(), &skel, &cotangent).unwrap();

        let scalar = |x: &Array2<f64>| -> f64 {
            let g = to_global_channels(x.view(), &skel).unwrap();
            g.positions.iter().zip(cotangent.iter()).map(|(p, c)| p * c).sum()
        };
        let h = 1e-6;
        for i in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, c]] += h;
                let mut xm = x.clone();
                xm[[i, c]] -= h;
                let fd = (scalar(&xp) - scalar(&xm)) / (2.0 * h);
                let a = analytic[[i, c]];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (fd - a).abs() / denom < 1e-4,
                    "grad mismatch at ({i},{c}): fd={fd} analytic={a}"
                );
            }
        }
    }

    #[test]
    fn projection_round_trip_is_bit_exact() {
        let m = random_simplified(8, 5);
        let redundant = m.into_redundant_zero_filled();
        let back = simplified_from_redundant(&redundant);
        assert_eq!(back, m);
    }

    #[test]
    fn simplified_and_redundant_conversions_agree() {
        let skel = toy_skeleton();
        let m = random_simplified(12, 21);
        let redundant = m.into_redundant_zero_filled();
        let g1 = m.to_global(&skel).unwrap();
        let g2 = redundant.to_global(&skel).unwrap();
        for (a, b) in g1.positions.iter().zip(g2.positions.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn foot_contact_labels() {
        let skel = toy_skeleton();
        let j = skel.joint_count();
        // Stationary feet at ground level.
        let g = GlobalMotion {
            positions: Array3::zeros((5, j, 3)),
            root_yaw: Array1::zeros(5),
        };
        let labels = derive_foot_contact(&g, &skel, 0.01, 0.05).unwrap();
        assert!(labels.iter().all(|&v| v == 1.0));

        // Feet sliding 0.1 m/frame.
        let mut positions = Array3::zeros((5, j, 3));
        for i in 0..5 {
            for &foot in &skel.heel_toe_joints {
                positions[[i, foot, 0]] = 0.1 * i as f64;
            }
        }
        let g = GlobalMotion { positions, root_yaw: Array1::zeros(5) };
        let labels = derive_foot_contact(&g, &skel, 0.01, 0.05).unwrap();
        assert!(labels.iter().all(|&v| v == 0.0));

        assert!(derive_foot_contact(&g, &skel, -1.0, 0.05).is_err());
    }

    #[test]
    fn foot_contact_matches_per_frame_oracle_on_synthetic_gait() {
        let skel = toy_skeleton();
        let j = skel.joint_count();
        let f = 24;
        let mut positions = Array3::zeros((f, j, 3));
        // Left foot: stance for frames 0..12, swing after; right foot opposite.
        for i in 0..f {
            let swing_l = i >= 12;
            let swing_r = i < 12;
            positions[[i, 6, 0]] = if swing_l { 0.05 * i as f64 } else { 0.0 };
            positions[[i, 6, 1]] = if swing_l { 0.08 } else { 0.01 };
            positions[[i, 7, 0]] = if swing_r { 0.05 * i as f64 } else { 0.6 };
            positions[[i, 7, 1]] = if swing_r { 0.08 } else { 0.01 };
        }
        let g = GlobalMotion { positions, root_yaw: Array1::zeros(f) };
        let (vt, ht) = (0.02, 0.05);
        let labels = derive_foot_contact(&g, &skel, vt, ht).unwrap();
        for (ch, &joint) in skel.heel_toe_joints.iter().enumerate() {
            for i in 1..f {
                let mut d = 0.0;
                for dd in 0..3 {
                    let delta = g.positions[[i, joint, dd]] - g.positions[[i - 1, joint, dd]];
                    d += delta * delta;
                }
                let expect = (d.sqrt() < vt && g.positions[[i, joint, 1]] < ht) as u8 as f64;
                assert_eq!(labels[[i, ch]], expect, "frame {i} channel {ch}");
            }
            assert_eq!(labels[[0, ch]], labels[[1, ch]]);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let skel = toy_skeleton();
        let m = random_simplified(8, 17);
        let x = m.to_tensor();
        assert_eq!(x.ncols(), skel.layout().simplified_channels());
        let back = SimplifiedMotion::from_tensor(x.view(), skel.joint_count()).unwrap();
        assert_eq!(back, m);

        let r = m.into_redundant_zero_filled();
        let xr = r.to_tensor();
        assert_eq!(xr.ncols(), skel.layout().redundant_channels());
        let back = RedundantMotion::from_tensor(xr.view(), skel.joint_count()).unwrap();
        assert_eq!(back, r);
        // The simplified tensor is a strict prefix of the redundant tensor.
        for i in 0..x.nrows() {
            for c in 0..x.ncols() {
                assert_eq!(x[[i, c]], xr[[i, c]]);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let skel = toy_skeleton();
        let m = random_simplified(6, 2).into_redundant_zero_filled();
        let doc = m.to_json(20, &skel);
        let text = serde_json::to_string(&doc).unwrap();
        let parsed: MotionJson = serde_json::from_str(&text).unwrap();
        let back = RedundantMotion::from_json(&parsed).unwrap();
        assert_eq!(back, m);
        assert_eq!(parsed.fps, 20);
        assert_eq!(parsed.skeleton, "toy8");
    }
}
