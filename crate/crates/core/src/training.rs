//! Training loops for both denoiser stages.
//!
//! The loss is the sum of an elementwise MSE on the clean-sample prediction
//! and an MSE between the decoded world positions of the prediction and the
//! ground truth. Stage 1 trains with random sparse trajectory conditions;
//! stage 2 alternates per batch item, at probability one half, between plain
//! batches and inpainting batches whose observed entries are re-substituted
//! with freshly noised ground truth.

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{Conditioning, Denoiser, DenoiserConfig, Stage};
use crate::diffusion::{q_sample, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::guidance::TrajectorySpec;
use crate::inpaint::{sample_training_mask, MaskSpec};
use crate::motion::{to_global_channels, to_global_vjp};
use crate::nn::{Adam, ParamBinding};
use crate::norm::Normalization;
use crate::skeleton::Skeleton;
use crate::tape::{Tape, VarId};
use crate::text::encode_text;

/// Which channel set a stage-1 model is trained on. The simplified prefix is
/// the default; the full redundant set exists for instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Simplified,
    Redundant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Iteration at which the rate steps down to `lr_final`.
    pub lr_drop_at: usize,
    pub lr_final: f64,
    pub seed: u64,
    /// Shared-weights inpainting mix for the completion stage: when true,
    /// half the training items carry re-substituted partial observations.
    /// When false the model trains purely on fully noised inputs. Ignored by
    /// the trajectory-control stage.
    pub inpainting_mix: bool,
}

impl TrainConfig {
    /// Desk-scale default: short run, the published step-down shape.
    pub fn desk(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            batch_size: 4,
            lr_initial: 2e-4,
            lr_drop_at: iterations / 2,
            lr_final: 1e-5,
            seed,
            inpainting_mix: true,
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration < self.lr_drop_at {
            self.lr_initial
        } else {
            self.lr_final
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if self.lr_initial <= 0.0 || self.lr_final <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("at least one iteration")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// MSE between the decoded world positions of a raw-space prediction and the
/// raw-space ground truth, attached to the tape through a precomputed
/// gradient. Channels beyond the simplified prefix receive no gradient.
fn global_loss_on_tape(
    tape: &mut Tape,
    pred_raw: VarId,
    clean_raw: &Array2<f64>,
    skeleton: &Skeleton,
) -> Result<VarId> {
    let pred = tape.value(pred_raw).clone();
    let gp = to_global_channels(pred.view(), skeleton)?;
    let gc = to_global_channels(clean_raw.view(), skeleton)?;
    let f = gp.frames();
    let j = skeleton.joint_count();
    let n = (f * j * 3) as f64;
    let mut value = 0.0;
    let mut grad_pos = Array3::zeros((f, j, 3));
    for i in 0..f {
        for k in 0..j {
            for d in 0..3 {
                let diff = gp.positions[[i, k, d]] - gc.positions[[i, k, d]];
                value += diff * diff;
                grad_pos[[i, k, d]] = 2.0 * diff / n;
            }
        }
    }
    let grad = to_global_vjp(pred.view(), skeleton, &grad_pos)?;
    Ok(tape.scalar_fn(pred_raw, value / n, grad))
}

/// Elementwise prediction loss plus the decoded-position loss, composed on
/// the tape for one sample. `clean_norm` is the normalized target.
fn sample_loss(
    tape: &mut Tape,
    pred_norm: VarId,
    clean_norm: &Array2<f64>,
    norm: &Normalization,
    skeleton: &Skeleton,
) -> Result<VarId> {
    let target = tape.leaf(clean_norm.clone());
    let diff = tape.sub(pred_norm, target);
    let elem = tape.mean_sq(diff);

    let std_row = tape.leaf(Array2::from_shape_vec((1, norm.channels()), norm.std.clone())
        .expect("row"));
    let mean_row = tape.leaf(Array2::from_shape_vec((1, norm.channels()), norm.mean.clone())
        .expect("row"));
    let scaled = tape.mul_row(pred_norm, std_row);
    let pred_raw = tape.add_row(scaled, mean_row);
    let clean_raw = norm.denormalize(&clean_norm.view())?;
    let global = global_loss_on_tape(tape, pred_raw, &clean_raw, skeleton)?;
    Ok(tape.add(elem, global))
}

struct PreparedSample {
    x_t: Array2<f64>,
    clean_norm: Array2<f64>,
    t: usize,
    text: Array1<f64>,
    trajectory: Option<Array2<f64>>,
}

/// Random sparse trajectory condition from a clean motion: a non-empty
/// subset of the controllable joints at a handful of random frames.
fn random_trajectory_condition(
    clean_raw: &Array2<f64>,
    skeleton: &Skeleton,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let frames = clean_raw.nrows();
    let global = to_global_channels(clean_raw.view(), skeleton)?;
    let mut spec = TrajectorySpec::empty(frames, skeleton.joint_count());
    let mut pool = skeleton.controllable_joints.to_vec();
    let count = rng.gen_range(1..=pool.len());
    for _ in 0..count {
        let k = pool.swap_remove(rng.gen_range(0..pool.len()));
        let keyframes = rng.gen_range(1..=5.min(frames));
        for _ in 0..keyframes {
            let i = rng.gen_range(0..frames);
            spec.set_target(
                i,
                k,
                [
                    global.positions[[i, k, 0]],
                    global.positions[[i, k, 1]],
                    global.positions[[i, k, 2]],
                ],
            );
        }
    }
    spec.condition_features(skeleton)
}

fn prepare_sample(
    dataset: &Dataset,
    norm: &Normalization,
    stage: Stage,
    text_embed_dim: usize,
    sched: &NoiseSchedule,
    inpainting_mix: bool,
    rng: &mut impl Rng,
) -> Result<PreparedSample> {
    let sample = &dataset.train[rng.gen_range(0..dataset.train.len())];
    let full = sample.motion.to_tensor();
    let raw = match stage {
        Stage::TrajectoryControl if norm.channels() < full.ncols() => {
            full.slice(ndarray::s![.., ..norm.channels()]).to_owned()
        }
        _ => full,
    };
    let clean_norm = norm.normalize(&raw.view())?;
    let t = rng.gen_range(1..=sched.steps());
    let eps = Array2::from_shape_fn(clean_norm.raw_dim(), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let mut x_t = q_sample(&clean_norm, t, &eps, sched)?;
    let text = encode_text(&sample.prompt, text_embed_dim).embedding;

    let trajectory = match stage {
        Stage::TrajectoryControl => {
            Some(random_trajectory_condition(&raw, &dataset.skeleton, rng)?)
        }
        Stage::MotionCompletion => {
            // Shared-weights regime: half the items get an observation mask
            // whose entries are re-substituted with freshly noised truth.
            if inpainting_mix {
                if let Some(mask) =
                    sample_training_mask(&dataset.skeleton, clean_norm.nrows(), rng)?
                {
                    let spec = MaskSpec::new(mask, clean_norm.clone())?;
                    spec.substitute(&mut x_t, t, sched, rng)?;
                }
            }
            None
        }
    };
    Ok(PreparedSample { x_t, clean_norm, t, text, trajectory })
}

fn batch_loss(
    model: &Denoiser,
    tape: &mut Tape,
    binding: &ParamBinding,
    batch: &[PreparedSample],
    norm: &Normalization,
    skeleton: &Skeleton,
) -> Result<VarId> {
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let x = tape.leaf(item.x_t.clone());
        let cond = Conditioning {
            t: item.t,
            text: Some(&item.text),
            trajectory: item.trajectory.as_ref(),
        };
        let pred = model.forward_on_tape(tape, binding, x, &cond)?;
        losses.push(sample_loss(tape, pred, &item.clean_norm, norm, skeleton)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l);
    }
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Train a denoiser of either stage on the dataset's train split. The run is
/// bit-reproducible for a fixed seed; a loss above a thousand times the
/// initial loss (or non-finite) aborts with a divergence error.
pub fn train(
    dataset: &Dataset,
    model_config: DenoiserConfig,
    schedule: ScheduleConfig,
    config: &TrainConfig,
) -> Result<(Denoiser, Normalization, TrainReport)> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let skeleton = &dataset.skeleton;
    let layout = skeleton.layout();
    let norm = match model_config.channels {
        c if c == layout.redundant_channels() => dataset.norm.clone(),
        c if c == layout.simplified_channels() => {
            dataset.norm.prefix(layout.simplified_channels())?
        }
        c => {
            return Err(Error::Config(format!(
                "model channel count {c} matches neither representation"
            )))
        }
    };
    let sched = NoiseSchedule::new(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Denoiser::new(model_config, config.seed ^ 0x6b67)?;
    let mut adam = Adam::new(&model.params);
    let mut history = Vec::with_capacity(config.iterations);
    let mut initial_loss = None;

    for iteration in 0..config.iterations {
        let batch: Vec<PreparedSample> = (0..config.batch_size)
            .map(|_| {
                prepare_sample(
                    dataset,
                    &norm,
                    model_config.stage,
                    model_config.text_embed_dim,
                    &sched,
                    config.inpainting_mix,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let loss_var = batch_loss(&model, &mut tape, &binding, &batch, &norm, skeleton)?;
        let loss = tape.scalar(loss_var);
        let reference = *initial_loss.get_or_insert(loss.max(1e-12));
        if !loss.is_finite() || loss > 1e3 * reference {
            return Err(Error::TrainingDivergence(format!(
                "loss {loss} at iteration {iteration} (initial {reference})"
            )));
        }
        let grads = tape.backward(loss_var);
        let param_grads = binding.gradients(&grads);
        adam.update(&mut model.params, &param_grads, config.learning_rate(iteration));
        history.push(loss);
    }
    Ok((model, norm, TrainReport { loss_history: history }))
}

/// Convenience wrapper: stage-1 model over the chosen representation.
pub fn train_stage1(
    dataset: &Dataset,
    representation: Representation,
    mut model_config: DenoiserConfig,
    schedule: ScheduleConfig,
    config: &TrainConfig,
) -> Result<(Denoiser, Normalization, TrainReport)> {
    let layout = dataset.skeleton.layout();
    model_config.stage = Stage::TrajectoryControl;
    model_config.channels = match representation {
        Representation::Simplified => layout.simplified_channels(),
        Representation::Redundant => layout.redundant_channels(),
    };
    train(dataset, model_config, schedule, config)
}

/// Convenience wrapper: stage-2 model over the redundant representation.
pub fn train_stage2(
    dataset: &Dataset,
    mut model_config: DenoiserConfig,
    schedule: ScheduleConfig,
    config: &TrainConfig,
) -> Result<(Denoiser, Normalization, TrainReport)> {
    let layout = dataset.skeleton.layout();
    model_config.stage = Stage::MotionCompletion;
    model_config.channels = layout.redundant_channels();
    train(dataset, model_config, schedule, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_dataset() -> Dataset {
        build_dataset(&DatasetConfig {
            samples_per_family: 7,
            max_frames: 24,
            fps: 20,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_model(stage: Stage, channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            stage,
            layers: 1,
            width: 32,
            heads: 2,
            max_frames: 24,
            channels,
            text_embed_dim: 8,
        }
    }

    #[test]
    fn elem_loss_matches_a_naive_oracle() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::from_shape_fn((3, 4), |(i, j)| (i + 2 * j) as f64 * 0.1));
        let b = tape.leaf(Array2::from_shape_fn((3, 4), |(i, j)| (2 * i + j) as f64 * 0.07));
        let d = tape.sub(a, b);
        let loss = tape.mean_sq(d);
        let mut expect = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                let diff = (i as f64 + 2.0 * j as f64) * 0.1 - (2.0 * i as f64 + j as f64) * 0.07;
                expect += diff * diff;
            }
        }
        expect /= 12.0;
        assert_abs_diff_eq!(tape.scalar(loss), expect, epsilon = 1e-12);
    }

    #[test]
    fn global_loss_gradient_matches_finite_differences() {
        let skel = crate::skeleton::toy_skeleton();
        let channels = skel.layout().simplified_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = Array2::from_shape_fn((5, channels), |_| rng.gen_range(-0.3..0.3));
        let pred0 = Array2::from_shape_fn((5, channels), |_| rng.gen_range(-0.3..0.3));

        let value_at = |pred: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let p = tape.leaf(pred.clone());
            let l = global_loss_on_tape(&mut tape, p, &clean, &skel).unwrap();
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let p = tape.leaf(pred0.clone());
        let l = global_loss_on_tape(&mut tape, p, &clean, &skel).unwrap();
        let grads = tape.backward(l);
        let analytic = &grads[p.0];
        let h = 1e-6;
        for _ in 0..25 {
            let i = rng.gen_range(0..5);
            let c = rng.gen_range(0..channels);
            let mut plus = pred0.clone();
            plus[[i, c]] += h;
            let mut minus = pred0.clone();
            minus[[i, c]] -= h;
            let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * h);
            let a = analytic[[i, c]];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!((fd - a).abs() / denom < 1e-5, "({i},{c}): fd={fd} a={a}");
        }
    }

    #[test]
    fn training_is_reproducible_for_a_fixed_seed() {
        let ds = tiny_dataset();
        let cfg = TrainConfig { iterations: 5, batch_size: 2, ..TrainConfig::desk(5, 42) };
        let model_cfg = tiny_model(Stage::MotionCompletion, ds.skeleton.layout().redundant_channels());
        let sched = ScheduleConfig::with_steps(50);
        let (m1, _, r1) = train(&ds, model_cfg, sched, &cfg).unwrap();
        let (m2, _, r2) = train(&ds, model_cfg, sched, &cfg).unwrap();
        assert_eq!(r1.loss_history, r2.loss_history);
        assert_eq!(m1.params.values(), m2.params.values());
    }

    #[test]
    fn stage2_training_reduces_the_loss() {
        let ds = tiny_dataset();
        let iters = 300;
        let cfg = TrainConfig {
            iterations: iters,
            batch_size: 4,
            lr_initial: 1e-3,
            lr_drop_at: iters,
            lr_final: 1e-5,
            seed: 3,
            inpainting_mix: true,
        };
        let model_cfg = tiny_model(Stage::MotionCompletion, ds.skeleton.layout().redundant_channels());
        let (_, _, report) = train(&ds, model_cfg, ScheduleConfig::with_steps(50), &cfg).unwrap();
        let head: f64 = report.loss_history[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = report.loss_history[iters - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head * 0.5, "head {head}, tail {tail}");
    }

    #[test]
    fn stage1_training_reduces_the_loss() {
        let ds = tiny_dataset();
        let iters = 300;
        let cfg = TrainConfig {
            iterations: iters,
            batch_size: 4,
            lr_initial: 1e-3,
            lr_drop_at: iters,
            lr_final: 1e-5,
            seed: 4,
            inpainting_mix: true,
        };
        let model_cfg = tiny_model(Stage::TrajectoryControl, 0);
        let (model, norm, report) = train_stage1(
            &ds,
            Representation::Simplified,
            model_cfg,
            ScheduleConfig::with_steps(50),
            &cfg,
        )
        .unwrap();
        assert_eq!(model.config.channels, ds.skeleton.layout().simplified_channels());
        assert_eq!(norm.channels(), model.config.channels);
        let head: f64 = report.loss_history[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = report.loss_history[iters - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head * 0.5, "head {head}, tail {tail}");
    }

    #[test]
    fn absurd_learning_rate_trips_the_divergence_guard() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 2,
            lr_initial: 3e3,
            lr_drop_at: 200,
            lr_final: 3e3,
            seed: 5,
            inpainting_mix: true,
        };
        let model_cfg = tiny_model(Stage::MotionCompletion, ds.skeleton.layout().redundant_channels());
        let err = train(&ds, model_cfg, ScheduleConfig::with_steps(50), &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingDivergence(_)), "got {err:?}");
    }

    #[test]
    fn csv_export_lists_every_iteration() {
        let report = TrainReport { loss_history: vec![1.0, 0.5, 0.25] };
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("1,0.5"));
        assert_abs_diff_eq!(report.final_loss(), 0.25);
    }
}
