//! Trajectory guidance: refine the denoising posterior mean so the decoded
//! world positions of selected joints move toward sparse keyframe targets.
//!
//! The refinement runs a small inner optimization at every diffusion step.
//! Step ranges near the start of sampling use a cheap coarse phase; the last
//! steps use a longer fine phase. The objective is the masked mean squared
//! world-space distance; on the redundant representation it can additionally
//! route through the rotation channels (via forward kinematics) and the
//! velocity channels (via integration), which splits the objective weight
//! across channel groups.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fk::{fk_local_positions, fk_vjp};
use crate::motion::{to_global_channels, to_global_vjp};
use crate::norm::Normalization;
use crate::opt::{lbfgs_minimize, sgd_minimize};
use crate::skeleton::{ChannelLayout, Skeleton};

/// Sparse world-space keyframe targets for a motion of `F` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    /// F x j x 3 target world positions; entries with mask 0 are ignored.
    pub targets: Array3<f64>,
    /// F x j binary mask, 1 where the joint is constrained at that frame.
    pub mask: Array2<f64>,
}

impl TrajectorySpec {
    pub fn empty(frames: usize, joint_count: usize) -> Self {
        Self {
            targets: Array3::zeros((frames, joint_count, 3)),
            mask: Array2::zeros((frames, joint_count)),
        }
    }

    pub fn frames(&self) -> usize {
        self.mask.nrows()
    }

    pub fn set_target(&mut self, frame: usize, joint: usize, position: [f64; 3]) {
        for d in 0..3 {
            self.targets[[frame, joint, d]] = position[d];
        }
        self.mask[[frame, joint]] = 1.0;
    }

    pub fn constraint_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.constraint_count() == 0
    }

    /// Joints with at least one constrained frame, ascending.
    pub fn constrained_joints(&self) -> Vec<usize> {
        (0..self.mask.ncols())
            .filter(|&k| self.mask.column(k).iter().any(|&m| m != 0.0))
            .collect()
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        let j = skeleton.joint_count();
        if self.mask.ncols() != j || self.targets.shape() != [self.frames(), j, 3] {
            return Err(Error::Shape("trajectory spec shape mismatch".into()));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Config("trajectory mask must be binary".into()));
        }
        for k in self.constrained_joints() {
            if !skeleton.controllable_joints.contains(&k) {
                return Err(Error::Config(format!(
                    "joint {} ({}) is not controllable",
                    k, skeleton.joint_names[k]
                )));
            }
        }
        for i in 0..self.frames() {
            for k in 0..j {
                if self.mask[[i, k]] != 0.0 {
                    for d in 0..3 {
                        if !self.targets[[i, k, d]].is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite target at frame {i}, joint {k}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-frame condition features for the denoiser: one [x, y, z, mask]
    /// slot per controllable joint in the skeleton's fixed order.
    pub fn condition_features(&self, skeleton: &Skeleton) -> Result<Array2<f64>> {
        self.validate(skeleton)?;
        let f = self.frames();
        let mut out = Array2::zeros((f, 4 * skeleton.controllable_joints.len()));
        for (slot, &k) in skeleton.controllable_joints.iter().enumerate() {
            for i in 0..f {
                if self.mask[[i, k]] != 0.0 {
                    for d in 0..3 {
                        out[[i, slot * 4 + d]] = self.targets[[i, k, d]];
                    }
                    out[[i, slot * 4 + 3]] = 1.0;
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self, skeleton: &Skeleton) -> TrajectoryJson {
        let mut entries = Vec::new();
        for i in 0..self.frames() {
            for k in 0..self.mask.ncols() {
                if self.mask[[i, k]] != 0.0 {
                    entries.push(TrajectoryEntry {
                        frame: i,
                        joint: skeleton.joint_names[k].clone(),
                        position: [
                            self.targets[[i, k, 0]],
                            self.targets[[i, k, 1]],
                            self.targets[[i, k, 2]],
                        ],
                    });
                }
            }
        }
        TrajectoryJson { frames: self.frames(), entries }
    }

    pub fn from_json(doc: &TrajectoryJson, skeleton: &Skeleton) -> Result<Self> {
        let mut spec = Self::empty(doc.frames, skeleton.joint_count());
        for e in &doc.entries {
            let k = skeleton
                .joint_index(&e.joint)
                .ok_or_else(|| Error::Config(format!("unknown joint {:?}", e.joint)))?;
            if e.frame >= doc.frames {
                return Err(Error::Config(format!(
                    "keyframe {} outside 0..{}",
                    e.frame, doc.frames
                )));
            }
            spec.set_target(e.frame, k, e.position);
        }
        spec.validate(skeleton)?;
        Ok(spec)
    }
}

/// Serializable keyframe list, joints referenced by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryJson {
    pub frames: usize,
    pub entries: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub frame: usize,
    pub joint: String,
    pub position: [f64; 3],
}

/// Which redundant channel groups the guidance objective routes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceTargets {
    Position,
    PositionRotation,
    PositionRotationVelocity,
}

impl GuidanceTargets {
    fn route_count(self) -> usize {
        match self {
            GuidanceTargets::Position => 1,
            GuidanceTargets::PositionRotation => 2,
            GuidanceTargets::PositionRotationVelocity => 3,
        }
    }
}

/// Masked mean squared world-space distance between decoded joint positions
/// and the targets. Empty mask yields zero.
pub fn control_objective(
    x_raw: ArrayView2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
) -> Result<f64> {
    let (value, _) = position_route(x_raw, spec, skeleton)?;
    Ok(value)
}

/// Masked mean Euclidean world-space distance, meters. The instrumentation
/// traces report this (it reads in the same unit as the targets).
pub fn control_error(
    x_raw: ArrayView2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
) -> Result<f64> {
    let n = spec.constraint_count();
    if n == 0 {
        return Ok(0.0);
    }
    let global = to_global_channels(x_raw, skeleton)?;
    let mut total = 0.0;
    for i in 0..spec.frames() {
        for k in 0..skeleton.joint_count() {
            if spec.mask[[i, k]] != 0.0 {
                let mut d2 = 0.0;
                for d in 0..3 {
                    let diff = global.positions[[i, k, d]] - spec.targets[[i, k, d]];
                    d2 += diff * diff;
                }
                total += d2.sqrt();
            }
        }
    }
    Ok(total / n as f64)
}

fn position_route(
    x_raw: ArrayView2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
) -> Result<(f64, Array2<f64>)> {
    let n = spec.constraint_count();
    if n == 0 {
        return Ok((0.0, Array2::zeros(x_raw.raw_dim())));
    }
    let global = to_global_channels(x_raw, skeleton)?;
    let f = spec.frames();
    let j = skeleton.joint_count();
    let mut value = 0.0;
    let mut grad_pos = Array3::zeros((f, j, 3));
    for i in 0..f {
        for k in 0..j {
            if spec.mask[[i, k]] != 0.0 {
                for d in 0..3 {
                    let diff = global.positions[[i, k, d]] - spec.targets[[i, k, d]];
                    value += diff * diff;
                    grad_pos[[i, k, d]] = 2.0 * diff / n as f64;
                }
            }
        }
    }
    let grad = to_global_vjp(x_raw, skeleton, &grad_pos)?;
    Ok((value / n as f64, grad))
}

/// Shared tail of the alternate routes: given a tensor whose position
/// columns were rewritten to route-derived local offsets, compute the masked
/// objective and its gradient w.r.t. the modified tensor.
fn masked_objective_on(
    x_mod: &Array2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
) -> Result<(f64, Array2<f64>)> {
    let n = spec.constraint_count();
    let global = to_global_channels(x_mod.view(), skeleton)?;
    let f = spec.frames();
    let j = skeleton.joint_count();
    let mut value = 0.0;
    let mut grad_pos = Array3::zeros((f, j, 3));
    for i in 0..f {
        for k in 0..j {
            if spec.mask[[i, k]] != 0.0 {
                for d in 0..3 {
                    let diff = global.positions[[i, k, d]] - spec.targets[[i, k, d]];
                    value += diff * diff;
                    grad_pos[[i, k, d]] = 2.0 * diff / n as f64;
                }
            }
        }
    }
    let g_mod = to_global_vjp(x_mod.view(), skeleton, &grad_pos)?;
    Ok((value / n as f64, g_mod))
}

/// Rotation route: decode joint world positions by forward kinematics from
/// the 6D rotation channels instead of the position channels. The FK local
/// offsets are substituted into the position columns so the shared
/// local-to-global map and its VJP handle the root channels exactly; the
/// position-column cotangents are then pushed through the FK backward pass
/// into the rotation channels.
fn rotation_route(
    x_raw: ArrayView2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
) -> Result<(f64, Array2<f64>)> {
    let layout = skeleton.layout();
    if x_raw.ncols() != layout.redundant_channels() {
        return Err(Error::Shape(
            "rotation guidance route needs the redundant representation".into(),
        ));
    }
    if spec.is_empty() {
        return Ok((0.0, Array2::zeros(x_raw.raw_dim())));
    }
    let f = spec.frames();
    let j = skeleton.joint_count();
    let mut x_mod = x_raw.to_owned();
    let mut per_frame_rotations: Vec<Vec<[f64; 6]>> = Vec::with_capacity(f);
    for i in 0..f {
        let mut rotations = vec![[0.0f64; 6]; j];
        for k in 0..j {
            let c = layout.jr_col(k);
            for d in 0..6 {
                rotations[k][d] = x_raw[[i, c + d]];
            }
        }
        let local = fk_local_positions(&rotations, skeleton);
        let r_y = x_raw[[i, ChannelLayout::ROOT_HEIGHT]];
        for k in 1..j {
            let c = layout.jp_col(k);
            x_mod[[i, c]] = local[k][0];
            // Position columns carry absolute height; the FK offset is
            // root-relative, so add the root height back in.
            x_mod[[i, c + 1]] = r_y + local[k][1];
            x_mod[[i, c + 2]] = local[k][2];
        }
        per_frame_rotations.push(rotations);
    }
    let (value, g_mod) = masked_objective_on(&x_mod, spec, skeleton)?;

    let mut grad = Array2::zeros(x_raw.raw_dim());
    for i in 0..f {
        for col in 0..ChannelLayout::ROOT_CHANNELS {
            grad[[i, col]] += g_mod[[i, col]];
        }
        let mut grad_local = vec![[0.0f64; 3]; j];
        for k in 1..j {
            let c = layout.jp_col(k);
            grad_local[k] = [g_mod[[i, c]], g_mod[[i, c + 1]], g_mod[[i, c + 2]]];
            grad[[i, ChannelLayout::ROOT_HEIGHT]] += g_mod[[i, c + 1]];
        }
        let grot = fk_vjp(&per_frame_rotations[i], skeleton, &grad_local);
        for k in 0..j {
            let c = layout.jr_col(k);
            for d in 0..6 {
                grad[[i, c + d]] += grot[k][d];
            }
        }
    }
    Ok((value, grad))
}

/// Velocity route: decode non-root joint local positions by integrating the
/// velocity channels from the first frame's position channels, substituting
/// the result into the position columns. Gradients reach the velocity
/// channels (and the first frame's positions) through suffix sums over the
/// integration.
fn velocity_route(
    x_raw: ArrayView2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
) -> Result<(f64, Array2<f64>)> {
    let layout = skeleton.layout();
    if x_raw.ncols() != layout.redundant_channels() {
        return Err(Error::Shape(
            "velocity guidance route needs the redundant representation".into(),
        ));
    }
    if spec.is_empty() {
        return Ok((0.0, Array2::zeros(x_raw.raw_dim())));
    }
    let f = spec.frames();
    let j = skeleton.joint_count();
    let mut x_mod = x_raw.to_owned();
    for k in 1..j {
        let cp = layout.jp_col(k);
        let cv = layout.jv_col(k);
        for d in 0..3 {
            let mut q = x_raw[[0, cp + d]];
            for i in 1..f {
                q += x_raw[[i, cv + d]];
                x_mod[[i, cp + d]] = q;
            }
        }
    }
    let (value, g_mod) = masked_objective_on(&x_mod, spec, skeleton)?;

    let mut grad = Array2::zeros(x_raw.raw_dim());
    for i in 0..f {
        for col in 0..ChannelLayout::ROOT_CHANNELS {
            grad[[i, col]] += g_mod[[i, col]];
        }
    }
    // q[i] depends on j_v[1..=i] and j_p[0]: suffix sums over frames.
    for k in 1..j {
        let cp = layout.jp_col(k);
        let cv = layout.jv_col(k);
        for d in 0..3 {
            let mut suffix = 0.0;
            for i in (0..f).rev() {
                suffix += g_mod[[i, cp + d]];
                if i >= 1 {
                    grad[[i, cv + d]] += suffix;
                } else {
                    grad[[0, cp + d]] += suffix;
                }
            }
        }
    }
    Ok((value, grad))
}

/// Objective value and gradient averaged over the active routes.
pub fn routed_objective(
    x_raw: ArrayView2<f64>,
    spec: &TrajectorySpec,
    skeleton: &Skeleton,
    targets: GuidanceTargets,
) -> Result<(f64, Array2<f64>)> {
    let (mut value, mut grad) = position_route(x_raw, spec, skeleton)?;
    if matches!(
        targets,
        GuidanceTargets::PositionRotation | GuidanceTargets::PositionRotationVelocity
    ) {
        let (v, g) = rotation_route(x_raw, spec, skeleton)?;
        value += v;
        grad += &g;
    }
    if matches!(targets, GuidanceTargets::PositionRotationVelocity) {
        let (v, g) = velocity_route(x_raw, spec, skeleton)?;
        value += v;
        grad += &g;
    }
    let scale = 1.0 / targets.route_count() as f64;
    Ok((value * scale, grad.mapv(|g| g * scale)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Lbfgs,
}

/// Inner-optimization settings for an inclusive range of diffusion steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidancePhase {
    pub step_low: usize,
    pub step_high: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

/// Two-phase schedule: a cheap coarse phase over the early steps and a longer
/// fine phase over the last `max(10, round(steps/100))` steps.
pub fn make_guidance_schedule(steps: usize, optimizer: OptimizerKind) -> Result<Vec<GuidancePhase>> {
    if steps < 20 {
        return Err(Error::Config(format!(
            "guidance schedule needs at least 20 diffusion steps, got {steps}"
        )));
    }
    let fine_cut = ((steps as f64 / 100.0).round() as usize).max(10);
    Ok(vec![
        GuidancePhase {
            step_low: fine_cut + 1,
            step_high: steps,
            iterations: 10,
            learning_rate: 0.5,
            optimizer,
        },
        GuidancePhase {
            step_low: 1,
            step_high: fine_cut,
            iterations: 100,
            learning_rate: 0.1,
            optimizer,
        },
    ])
}

/// Single flat phase: 10 iterations at rate 0.5 for every step.
pub fn flat_schedule(steps: usize, optimizer: OptimizerKind) -> Vec<GuidancePhase> {
    vec![GuidancePhase {
        step_low: 1,
        step_high: steps,
        iterations: 10,
        learning_rate: 0.5,
        optimizer,
    }]
}

pub fn phase_for(phases: &[GuidancePhase], t: usize) -> Option<&GuidancePhase> {
    phases.iter().find(|p| t >= p.step_low && t <= p.step_high)
}

/// Everything the per-step refinement needs besides the mean itself.
#[derive(Clone, Copy)]
pub struct GuidanceContext<'a> {
    pub skeleton: &'a Skeleton,
    pub spec: &'a TrajectorySpec,
    /// Stats of the normalized space the sampler operates in.
    pub norm: &'a Normalization,
    pub targets: GuidanceTargets,
}

/// Refine a posterior mean (in normalized space) against the trajectory
/// objective using the given phase. A fresh optimizer state is used each
/// call. An empty mask or a non-finite starting objective leaves the mean
/// unchanged.
pub fn guide_posterior(
    mu: Array2<f64>,
    ctx: &GuidanceContext,
    phase: &GuidancePhase,
) -> Result<Array2<f64>> {
    if ctx.spec.is_empty() {
        return Ok(mu);
    }
    ctx.spec.validate(ctx.skeleton)?;
    if ctx.spec.frames() != mu.nrows() {
        return Err(Error::Shape(format!(
            "trajectory spec has {} frames, mean has {}",
            ctx.spec.frames(),
            mu.nrows()
        )));
    }
    // Probe once so shape and config errors surface as errors rather than
    // silently skipped refinement.
    let probe = ctx.norm.denormalize(&mu.view())?;
    let (f0, _) = routed_objective(probe.view(), ctx.spec, ctx.skeleton, ctx.targets)?;
    if !f0.is_finite() {
        return Ok(mu);
    }

    let objective = |x: &Array2<f64>| -> (f64, Array2<f64>) {
        let raw = match ctx.norm.denormalize(&x.view()) {
            Ok(r) => r,
            Err(_) => return (f64::INFINITY, Array2::zeros(x.raw_dim())),
        };
        match routed_objective(raw.view(), ctx.spec, ctx.skeleton, ctx.targets) {
            Ok((v, grad_raw)) => {
                let grad = ctx
                    .norm
                    .grad_to_normalized(&grad_raw.view())
                    .unwrap_or_else(|_| Array2::zeros(x.raw_dim()));
                (v, grad)
            }
            Err(_) => (f64::INFINITY, Array2::zeros(x.raw_dim())),
        }
    };

    let (refined, _history) = match phase.optimizer {
        OptimizerKind::Sgd => {
            sgd_minimize(mu, phase.iterations, phase.learning_rate, objective)
        }
        OptimizerKind::Lbfgs => {
            lbfgs_minimize(mu, phase.iterations, phase.learning_rate, objective)
        }
    };
    Ok(refined)
}

/// Per-step control errors of the unguided and guided means across samples.
#[derive(Debug, Clone, Default)]
pub struct ErrorTrace {
    /// One entry per diffusion step, outer index in sampling order.
    pub steps: Vec<usize>,
    /// `predicted[s][n]`: error of sample `n` before refinement at step `s`.
    pub predicted: Vec<Vec<f64>>,
    /// `guided[s][n]`: error after refinement.
    pub guided: Vec<Vec<f64>>,
}

impl ErrorTrace {
    pub fn record(&mut self, step: usize, predicted: f64, guided: f64) {
        match self.steps.iter().position(|&s| s == step) {
            Some(idx) => {
                self.predicted[idx].push(predicted);
                self.guided[idx].push(guided);
            }
            None => {
                self.steps.push(step);
                self.predicted.push(vec![predicted]);
                self.guided.push(vec![guided]);
            }
        }
    }

    /// CSV with per-step mean and standard deviation over samples.
    pub fn to_csv(&self) -> String {
        fn mean_std(v: &[f64]) -> (f64, f64) {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        }
        let mut out = String::from("step,predicted_mean,predicted_std,guided_mean,guided_std\n");
        for (i, &step) in self.steps.iter().enumerate() {
            let (pm, ps) = mean_std(&self.predicted[i]);
            let (gm, gs) = mean_std(&self.guided[i]);
            out.push_str(&format!("{step},{pm},{ps},{gm},{gs}\n"));
        }
        out
    }

    fn step_stds(series: &[Vec<f64>]) -> Vec<f64> {
        series
            .iter()
            .map(|v| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
            })
            .collect()
    }

    /// Mean over steps of the per-step standard deviation of the predicted
    /// (pre-refinement) control error. The representation-stability
    /// comparison reads this.
    pub fn mean_predicted_std(&self) -> f64 {
        let stds = Self::step_stds(&self.predicted);
        stds.iter().sum::<f64>() / stds.len().max(1) as f64
    }

    /// Same statistic for the post-refinement error.
    pub fn mean_guided_std(&self) -> f64 {
        let stds = Self::step_stds(&self.guided);
        stds.iter().sum::<f64>() / stds.len().max(1) as f64
    }

    /// Mean guided error at the final (lowest) recorded step.
    pub fn final_guided_mean(&self) -> Option<f64> {
        let idx = self
            .steps
            .iter()
            .enumerate()
            .min_by_key(|(_, &s)| s)
            .map(|(i, _)| i)?;
        let v = &self.guided[idx];
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}
