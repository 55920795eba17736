//! Two-stage trajectory-controlled motion generation at desk scale.
//!
//! Stage 1 samples a simplified skeletal representation under gradient-based
//! trajectory guidance; stage 2 completes the full redundant representation
//! with a text-conditioned diffusion inpainting model whose observed channels
//! are held fixed. The crate also ships the training loops, the synthetic
//! dataset, the metric suite and the control-error instrumentation.

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod fk;
pub mod guidance;
pub mod inpaint;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod norm;
pub mod opt;
pub mod pipeline;
pub mod skeleton;
pub mod tape;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use motion::{
    derive_foot_contact, simplified_from_redundant, to_global_channels, to_global_vjp,
    GlobalMotion, MotionJson, RedundantMotion, SimplifiedMotion,
};
pub use skeleton::{toy_skeleton, ChannelLayout, Skeleton};
