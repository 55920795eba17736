//! Diffusion inpainting over the redundant representation.
//!
//! A binary spatiotemporal mask marks observed channels. During sampling the
//! observed entries of the current sample are overwritten with a noised copy
//! of the observed values (clean values at the terminal step, making the
//! observed channels of the output bit-exact). During training the same mask
//! shape drives the shared-weights regime: half of the batches see a random
//! observation mask, half see none.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::skeleton::{ChannelLayout, Skeleton};

/// Observed channels and their values, both frames x redundant channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Binary: 1 marks an observed entry.
    pub mask: Array2<f64>,
    /// Observed values; only entries with mask 1 are read.
    pub values: Array2<f64>,
}

impl MaskSpec {
    pub fn new(mask: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        if mask.shape() != values.shape() {
            return Err(Error::Shape(format!(
                "mask shape {:?} != values shape {:?}",
                mask.shape(),
                values.shape()
            )));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Config("observation mask must be binary".into()));
        }
        for (m, v) in mask.iter().zip(values.iter()) {
            if *m != 0.0 && !v.is_finite() {
                return Err(Error::Numeric("non-finite observed value".into()));
            }
        }
        Ok(Self { mask, values })
    }

    /// The all-unobserved mask (plain generation).
    pub fn none(frames: usize, channels: usize) -> Self {
        Self {
            mask: Array2::zeros((frames, channels)),
            values: Array2::zeros((frames, channels)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&m| m == 0.0)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    /// Overwrite the observed entries of `x` for step `t`: a freshly noised
    /// copy of the observed values at t >= 1, the clean values at t = 0.
    pub fn substitute<R: Rng>(
        &self,
        x: &mut Array2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<()> {
        if x.shape() != self.mask.shape() {
            return Err(Error::Shape(format!(
                "sample shape {:?} != mask shape {:?}",
                x.shape(),
                self.mask.shape()
            )));
        }
        if self.is_empty() {
            return Ok(());
        }
        if t == 0 {
            for ((xv, &m), &v) in x.iter_mut().zip(self.mask.iter()).zip(self.values.iter()) {
                if m != 0.0 {
                    *xv = v;
                }
            }
            return Ok(());
        }
        let eps = Array2::from_shape_fn(self.values.raw_dim(), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let noised = q_sample(&self.values, t, &eps, sched)?;
        for ((xv, &m), &v) in x.iter_mut().zip(self.mask.iter()).zip(noised.iter()) {
            if m != 0.0 {
                *xv = v;
            }
        }
        Ok(())
    }
}

/// Observation mask for handing a first-stage result to the second stage:
/// the root channels plus the local-position columns of the given joints,
/// over the given frames. The pelvis is covered by the root channels and
/// contributes no extra columns.
pub fn build_observation_mask(
    skeleton: &Skeleton,
    frames: usize,
    joints: &[usize],
    observed_frames: &[usize],
) -> Result<Array2<f64>> {
    if joints.is_empty() {
        return Err(Error::Config("observation mask needs at least one joint".into()));
    }
    let layout = skeleton.layout();
    for &k in joints {
        if k >= skeleton.joint_count() {
            return Err(Error::Config(format!("joint {k} out of range")));
        }
    }
    let mut mask = Array2::zeros((frames, layout.redundant_channels()));
    for &i in observed_frames {
        if i >= frames {
            return Err(Error::Config(format!("observed frame {i} outside 0..{frames}")));
        }
        for col in 0..ChannelLayout::ROOT_CHANNELS {
            mask[[i, col]] = 1.0;
        }
        for &k in joints {
            if k == 0 {
                continue;
            }
            let c = layout.jp_col(k);
            for d in 0..3 {
                mask[[i, c + d]] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// JSON form of an observation request: joints by name, frames by index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationJson {
    pub frames: usize,
    pub joints: Vec<String>,
    /// Empty means every frame.
    #[serde(default)]
    pub observed_frames: Vec<usize>,
}

impl ObservationJson {
    pub fn build_mask(&self, skeleton: &Skeleton) -> Result<Array2<f64>> {
        let joints: Vec<usize> = self
            .joints
            .iter()
            .map(|name| {
                skeleton
                    .joint_index(name)
                    .ok_or_else(|| Error::Config(format!("unknown joint {name:?}")))
            })
            .collect::<Result<_>>()?;
        let all_frames: Vec<usize>;
        let observed = if self.observed_frames.is_empty() {
            all_frames = (0..self.frames).collect();
            &all_frames
        } else {
            &self.observed_frames
        };
        build_observation_mask(skeleton, self.frames, &joints, observed)
    }
}

/// Draw a training observation mask for the shared-weights regime: with
/// probability one half an inpainting mask over a random non-empty subset of
/// the controllable joints and a random contiguous frame span, otherwise no
/// mask at all.
pub fn sample_training_mask<R: Rng>(
    skeleton: &Skeleton,
    frames: usize,
    rng: &mut R,
) -> Result<Option<Array2<f64>>> {
    if rng.gen::<f64>() >= 0.5 {
        return Ok(None);
    }
    let all = skeleton.controllable_joints;
    let count = rng.gen_range(1..=all.len());
    let mut pool: Vec<usize> = all.to_vec();
    let mut joints = Vec::with_capacity(count);
    for _ in 0..count {
        joints.push(pool.swap_remove(rng.gen_range(0..pool.len())));
    }
    let span_len = rng.gen_range(1..=frames);
    let start = rng.gen_range(0..=frames - span_len);
    let observed: Vec<usize> = (start..start + span_len).collect();
    Ok(Some(build_observation_mask(skeleton, frames, &joints, &observed)?))
}
