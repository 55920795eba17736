//! Transformer denoiser shared by both pipeline stages.
//!
//! The model predicts the clean sample from a noisy one. Conditioning enters
//! through a single token prepended to the frame sequence (timestep features
//! plus a projected prompt embedding) and, for the trajectory-control stage,
//! through per-frame trajectory features added to the frame embeddings. How
//! trajectory conditioning enters the network is underdetermined upstream;
//! adding it framewise before the encoder stack is this crate's choice.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_embedding, EncoderLayer, LayerNorm, Linear, NamedTensor, ParamBinding,
    ParamStore,
};
use crate::norm::Normalization;
use crate::skeleton::CONTROLLABLE_JOINT_COUNT;
use crate::tape::{Tape, VarId};

/// Per-frame trajectory-condition channels: one [x, y, z, mask] slot per
/// controllable joint in the skeleton's fixed controllable order.
pub const TRAJ_COND_CHANNELS: usize = 4 * CONTROLLABLE_JOINT_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// First stage: simplified representation under trajectory guidance.
    TrajectoryControl,
    /// Second stage: redundant representation completed by inpainting.
    MotionCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub stage: Stage,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_frames: usize,
    /// Per-frame channel count of the representation the model denoises.
    pub channels: usize,
    /// Dimension of the prompt embedding; 0 disables text conditioning.
    pub text_embed_dim: usize,
}

impl DenoiserConfig {
    /// Desk-scale default for a given stage and channel count.
    pub fn desk(stage: Stage, channels: usize) -> Self {
        Self {
            stage,
            layers: 2,
            width: 64,
            heads: 4,
            max_frames: 64,
            channels,
            text_embed_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.channels == 0 || self.max_frames == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Conditioning inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// Diffusion timestep, 1-based.
    pub t: usize,
    /// Prompt embedding of length `text_embed_dim`; `None` means the null
    /// (all-zero) embedding.
    pub text: Option<&'a Array1<f64>>,
    /// Trajectory features, frames x [`TRAJ_COND_CHANNELS`]. Required for the
    /// trajectory-control stage, rejected otherwise.
    pub trajectory: Option<&'a Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    in_proj: Linear,
    traj_mlp: Option<[Linear; 3]>,
    time_proj: Linear,
    text_proj: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w = config.width;
        let in_proj = Linear::new(&mut params, &mut rng, "in", config.channels, w);
        let traj_mlp = match config.stage {
            Stage::TrajectoryControl => Some([
                Linear::new(&mut params, &mut rng, "traj.0", TRAJ_COND_CHANNELS, w),
                Linear::new(&mut params, &mut rng, "traj.1", w, w),
                Linear::new(&mut params, &mut rng, "traj.2", w, w),
            ]),
            Stage::MotionCompletion => None,
        };
        let time_proj = Linear::new(&mut params, &mut rng, "time", w, w);
        let text_proj = if config.text_embed_dim > 0 {
            Some(Linear::new(&mut params, &mut rng, "text", config.text_embed_dim, w))
        } else {
            None
        };
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut params, &mut rng, &format!("enc.{i}"), w, config.heads))
            .collect();
        let final_ln = LayerNorm::new(&mut params, "final_ln", w);
        let out_proj = Linear::new(&mut params, &mut rng, "out", w, config.channels);
        Ok(Self {
            config,
            params,
            in_proj,
            traj_mlp,
            time_proj,
            text_proj,
            encoder,
            final_ln,
            out_proj,
        })
    }

    fn check_conditioning(&self, frames: usize, cond: &Conditioning) -> Result<()> {
        if frames == 0 || frames > self.config.max_frames {
            return Err(Error::Shape(format!(
                "frame count {frames} outside 1..={}",
                self.config.max_frames
            )));
        }
        if cond.t == 0 {
            return Err(Error::Step("timestep must be >= 1".into()));
        }
        match (self.config.stage, cond.trajectory) {
            (Stage::TrajectoryControl, None) => {
                return Err(Error::Config(
                    "trajectory-control stage requires trajectory features".into(),
                ))
            }
            (Stage::MotionCompletion, Some(_)) => {
                return Err(Error::Config(
                    "motion-completion stage takes no trajectory features".into(),
                ))
            }
            _ => {}
        }
        if let Some(traj) = cond.trajectory {
            if traj.nrows() != frames || traj.ncols() != TRAJ_COND_CHANNELS {
                return Err(Error::Shape(format!(
                    "trajectory features must be {frames}x{TRAJ_COND_CHANNELS}, got {}x{}",
                    traj.nrows(),
                    traj.ncols()
                )));
            }
        }
        if let Some(text) = cond.text {
            if text.len() != self.config.text_embed_dim {
                return Err(Error::Shape(format!(
                    "text embedding length {} != {}",
                    text.len(),
                    self.config.text_embed_dim
                )));
            }
        }
        Ok(())
    }

    /// Forward pass on an existing tape so a training loss can be composed on
    /// top. `x` must be a frames x channels variable already on the tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: VarId,
        cond: &Conditioning,
    ) -> Result<VarId> {
        let frames = tape.value(x).nrows();
        if tape.value(x).ncols() != self.config.channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                tape.value(x).ncols(),
                self.config.channels
            )));
        }
        self.check_conditioning(frames, cond)?;
        let w = self.config.width;

        let mut h = self.in_proj.forward(tape, binding, x);
        let pos = Array2::from_shape_fn((frames, w), |(i, j)| {
            sinusoidal_embedding(i as f64, w)[j]
        });
        let pos = tape.leaf(pos);
        h = tape.add(h, pos);

        if let Some(mlp) = &self.traj_mlp {
            let traj = cond.trajectory.expect("validated above");
            let mut f = tape.leaf(traj.clone());
            f = mlp[0].forward(tape, binding, f);
            f = tape.gelu(f);
            f = mlp[1].forward(tape, binding, f);
            f = tape.gelu(f);
            f = mlp[2].forward(tape, binding, f);
            h = tape.add(h, f);
        }

        let time_feat = Array2::from_shape_vec(
            (1, w),
            sinusoidal_embedding(cond.t as f64, w),
        )
        .expect("row shape");
        let time_feat = tape.leaf(time_feat);
        let mut cond_token = self.time_proj.forward(tape, binding, time_feat);
        if let Some(text_proj) = &self.text_proj {
            let embed = match cond.text {
                Some(e) => Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("row"),
                None => Array2::zeros((1, self.config.text_embed_dim)),
            };
            let embed = tape.leaf(embed);
            let projected = text_proj.forward(tape, binding, embed);
            cond_token = tape.add(cond_token, projected);
        }

        let mut tokens = tape.concat_rows(&[cond_token, h]);
        for layer in &self.encoder {
            tokens = layer.forward(tape, binding, tokens);
        }
        let normed = self.final_ln.forward(tape, binding, tokens);
        let out = self.out_proj.forward(tape, binding, normed);
        Ok(tape.slice_rows(out, 1, frames + 1))
    }

    /// Predict the clean sample from a noisy one. Deterministic in its inputs.
    pub fn predict_x0(&self, x_t: &ArrayView2<f64>, cond: &Conditioning) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let x = tape.leaf(x_t.to_owned());
        let out = self.forward_on_tape(&mut tape, &binding, x, cond)?;
        Ok(tape.value(out).clone())
    }
}

/// On-disk model document: architecture, noise-schedule settings, the
/// normalization stats the model was trained under, and the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub norm: Normalization,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_denoiser(
        denoiser: &Denoiser,
        schedule: ScheduleConfig,
        norm: Normalization,
    ) -> Self {
        Self {
            config: denoiser.config,
            schedule,
            norm,
            tensors: denoiser.params.to_named_tensors(),
        }
    }

    pub fn into_denoiser(self) -> Result<(Denoiser, ScheduleConfig, Normalization)> {
        let mut denoiser = Denoiser::new(self.config, 0)?;
        denoiser.params.load_named_tensors(&self.tensors)?;
        Ok((denoiser, self.schedule, self.norm))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn small_config(stage: Stage) -> DenoiserConfig {
        DenoiserConfig {
            stage,
            layers: 2,
            width: 16,
            heads: 2,
            max_frames: 8,
            channels: 5,
            text_embed_dim: 6,
        }
    }

    fn random_input(rng: &mut impl Rng, frames: usize, channels: usize) -> Array2<f64> {
        Array2::from_shape_fn((frames, channels), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn prediction_is_deterministic_and_shaped() {
        let model = Denoiser::new(small_config(Stage::MotionCompletion), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 4, 5);
        let text = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5]);
        let cond = Conditioning { t: 3, text: Some(&text), trajectory: None };
        let a = model.predict_x0(&x.view(), &cond).unwrap();
        let b = model.predict_x0(&x.view(), &cond).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 5]);
    }

    #[test]
    fn conditioning_mismatches_are_rejected() {
        let model = Denoiser::new(small_config(Stage::TrajectoryControl), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 4, 5);
        // Missing trajectory features.
        let cond = Conditioning { t: 3, text: None, trajectory: None };
        assert!(model.predict_x0(&x.view(), &cond).is_err());
        // Wrong trajectory shape.
        let traj = Array2::zeros((3, TRAJ_COND_CHANNELS));
        let cond = Conditioning { t: 3, text: None, trajectory: Some(&traj) };
        assert!(model.predict_x0(&x.view(), &cond).is_err());
        // t = 0.
        let traj = Array2::zeros((4, TRAJ_COND_CHANNELS));
        let cond = Conditioning { t: 0, text: None, trajectory: Some(&traj) };
        assert!(model.predict_x0(&x.view(), &cond).is_err());
        // Completion stage rejects trajectory features.
        let model = Denoiser::new(small_config(Stage::MotionCompletion), 7).unwrap();
        let cond = Conditioning { t: 3, text: None, trajectory: Some(&traj) };
        assert!(model.predict_x0(&x.view(), &cond).is_err());
    }

    #[test]
    fn text_and_timestep_change_the_output() {
        let model = Denoiser::new(small_config(Stage::MotionCompletion), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 4, 5);
        let text = Array1::from_vec(vec![1.0, 0.0, -1.0, 0.5, 0.25, 2.0]);
        let base = model
            .predict_x0(&x.view(), &Conditioning { t: 3, text: None, trajectory: None })
            .unwrap();
        let with_text = model
            .predict_x0(&x.view(), &Conditioning { t: 3, text: Some(&text), trajectory: None })
            .unwrap();
        let later_t = model
            .predict_x0(&x.view(), &Conditioning { t: 9, text: None, trajectory: None })
            .unwrap();
        assert_ne!(base, with_text);
        assert_ne!(base, later_t);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = Denoiser::new(small_config(Stage::TrajectoryControl), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input(&mut rng, 3, 5);
        let target = random_input(&mut rng, 3, 5);
        let traj = Array2::from_shape_fn((3, TRAJ_COND_CHANNELS), |_| rng.gen_range(-1.0..1.0));
        let text = Array1::from_vec(vec![0.3, -0.1, 0.2, 0.4, -0.6, 0.05]);

        let loss_with = |params: &ParamStore| -> f64 {
            let mut m = model.clone();
            m.params = params.clone();
            let mut tape = Tape::new();
            let binding = m.params.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let cond = Conditioning { t: 2, text: Some(&text), trajectory: Some(&traj) };
            let out = m.forward_on_tape(&mut tape, &binding, xv, &cond).unwrap();
            let tv = tape.leaf(target.clone());
            let diff = tape.sub(out, tv);
            let loss = tape.mean_sq(diff);
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let cond = Conditioning { t: 2, text: Some(&text), trajectory: Some(&traj) };
        let out = model.forward_on_tape(&mut tape, &binding, xv, &cond).unwrap();
        let tv = tape.leaf(target.clone());
        let diff = tape.sub(out, tv);
        let loss = tape.mean_sq(diff);
        let grads = tape.backward(loss);
        let param_grads = binding.gradients(&grads);

        // Spot-check a handful of entries in every parameter tensor.
        let h = 1e-5;
        for (pi, grad) in param_grads.iter().enumerate() {
            let (rows, cols) = (grad.nrows(), grad.ncols());
            for _ in 0..2 {
                let r = rng.gen_range(0..rows);
                let c = rng.gen_range(0..cols);
                let mut plus = model.params.clone();
                plus.get_mut(crate::nn::ParamId(pi))[(r, c)] += h;
                let mut minus = model.params.clone();
                minus.get_mut(crate::nn::ParamId(pi))[(r, c)] -= h;
                let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let a = grad[(r, c)];
                let denom = fd.abs().max(a.abs()).max(1e-4);
                assert!(
                    (fd - a).abs() / denom < 1e-3,
                    "param {pi} ({r},{c}): fd={fd} analytic={a}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let model = Denoiser::new(small_config(Stage::MotionCompletion), 7).unwrap();
        let schedule = ScheduleConfig::default();
        let norm = Normalization::identity(5);
        let ckpt = Checkpoint::from_denoiser(&model, schedule, norm);
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let (restored, _, _) = back.into_denoiser().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, 4, 5);
        let cond = Conditioning { t: 2, text: None, trajectory: None };
        assert_eq!(
            model.predict_x0(&x.view(), &cond).unwrap(),
            restored.predict_x0(&x.view(), &cond).unwrap()
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config(Stage::MotionCompletion);
        c.heads = 3;
        assert!(Denoiser::new(c, 0).is_err());
        let mut c = small_config(Stage::MotionCompletion);
        c.layers = 0;
        assert!(Denoiser::new(c, 0).is_err());
    }
}
