//! Shared fixtures for the criterion benchmarks.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use kinegen_core::guidance::TrajectorySpec;
use kinegen_core::{toy_skeleton, Skeleton};

pub const FRAMES: usize = 64;

pub fn skeleton() -> Skeleton {
    toy_skeleton()
}

/// Random redundant-layout tensor of plausible magnitude.
pub fn random_tensor(seed: u64, channels: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((FRAMES, channels), |_| rng.gen_range(-0.5..0.5))
}

/// Dense pelvis trajectory targets.
pub fn pelvis_spec(seed: u64, joint_count: usize) -> TrajectorySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Array3::zeros((FRAMES, joint_count, 3));
    let mut mask = Array2::zeros((FRAMES, joint_count));
    for i in 0..FRAMES {
        for d in 0..3 {
            targets[[i, 0, d]] = rng.gen_range(-1.0..1.0);
        }
        mask[[i, 0]] = 1.0;
    }
    TrajectorySpec { targets, mask }
}
