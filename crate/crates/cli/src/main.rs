//! Command-line surface: dataset synthesis, both training stages, guided
//! generation, metric evaluation, and per-step control-error instrumentation.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kinegen_core::data::{build_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split};
use kinegen_core::denoiser::{Checkpoint, DenoiserConfig, Stage};
use kinegen_core::diffusion::ScheduleConfig;
use kinegen_core::embedder::{train_embedder, EmbedderCheckpoint, EmbedderConfig, JointEmbedder};
use kinegen_core::guidance::{GuidanceTargets, OptimizerKind, TrajectoryJson, TrajectorySpec};
use kinegen_core::metrics::FEATURE_DIM;
use kinegen_core::pipeline::{
    control_configs, evaluate, generate, instrument_trace, Ablation, ControlConfig, EvalOutcome,
    GenerationRequest, InstrumentConfig, LoadedModel, SamplerSpec, StageSampler,
};
use kinegen_core::training::{train_stage1, train_stage2, Representation, TrainConfig};
use kinegen_core::{Error, GlobalMotion, Skeleton};

#[derive(Parser)]
#[command(name = "kinegen", about = "Two-stage trajectory-controlled motion generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic dataset and write it to a directory.
    SynthData(SynthDataArgs),
    /// Train the trajectory-control denoiser.
    TrainStage1(TrainStage1Args),
    /// Train the motion-completion denoiser.
    TrainStage2(TrainStage2Args),
    /// Train the contrastive text/motion embedder used by evaluation.
    TrainEmbedder(TrainEmbedderArgs),
    /// Generate one motion from a prompt and a trajectory file.
    Generate(GenerateArgs),
    /// Run the metric suite over a dataset split.
    Evaluate(EvaluateArgs),
    /// Record per-step control-error traces for one configuration.
    Instrument(InstrumentArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    samples_per_family: usize,
    #[arg(long, default_value_t = 64)]
    max_frames: usize,
    #[arg(long, default_value_t = 20)]
    fps: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainCommonArgs {
    /// Dataset directory written by synth-data.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Diffusion step count baked into the checkpoint's schedule.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optional CSV path for the loss history.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainStage1Args {
    #[command(flatten)]
    common: TrainCommonArgs,
    #[arg(long, value_enum, default_value_t = ReprArg::Simplified)]
    repr: ReprArg,
}

#[derive(Args)]
struct TrainStage2Args {
    #[command(flatten)]
    common: TrainCommonArgs,
    /// Disable the shared-weights inpainting mix (train on fully noised
    /// inputs only).
    #[arg(long)]
    no_inpainting_mix: bool,
}

#[derive(Args)]
struct TrainEmbedderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    iterations: usize,
    #[arg(long, default_value_t = 12)]
    batch_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Copy, Clone, ValueEnum)]
enum ReprArg {
    Simplified,
    Redundant,
}

impl From<ReprArg> for Representation {
    fn from(r: ReprArg) -> Self {
        match r {
            ReprArg::Simplified => Representation::Simplified,
            ReprArg::Redundant => Representation::Redundant,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum SamplerArg {
    Ddpm,
    Ddim,
}

#[derive(Copy, Clone, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Lbfgs,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Lbfgs => OptimizerKind::Lbfgs,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum AblationArg {
    None,
    PassAllJoints,
    PassTorsoJoints,
    SingleStage,
    RedundantStage1,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::PassAllJoints => Ablation::PassAllJoints,
            AblationArg::PassTorsoJoints => Ablation::PassTorsoJoints,
            AblationArg::SingleStage => Ablation::SingleStage,
            AblationArg::RedundantStage1 => Ablation::RedundantStage1,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum TargetsArg {
    Position,
    PositionRotation,
    PositionRotationVelocity,
}

impl From<TargetsArg> for GuidanceTargets {
    fn from(t: TargetsArg) -> Self {
        match t {
            TargetsArg::Position => GuidanceTargets::Position,
            TargetsArg::PositionRotation => GuidanceTargets::PositionRotation,
            TargetsArg::PositionRotationVelocity => GuidanceTargets::PositionRotationVelocity,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long)]
    prompt: Option<String>,
    /// Trajectory constraints (JSON: frames + per-keyframe joint targets).
    #[arg(long)]
    traj_file: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerArg::Ddpm)]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 50)]
    ddim_steps_s1: usize,
    #[arg(long, default_value_t = 50)]
    ddim_steps_s2: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AblationArg::None)]
    ablation: AblationArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Lbfgs)]
    optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = TargetsArg::Position)]
    targets: TargetsArg,
    /// Output motion JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-frame world-position CSV.
    #[arg(long)]
    positions_csv: Option<PathBuf>,
    /// Optional per-step control-error trace CSV.
    #[arg(long)]
    trace_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated joint names to control; omit to run the full grid.
    #[arg(long)]
    joints: Option<String>,
    /// Keyframe density: "dense" or a keyframe count per joint.
    #[arg(long, default_value = "dense")]
    density: String,
    /// Optional contrastive embedder checkpoint for retrieval precision.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SamplerArg::Ddpm)]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 50)]
    ddim_steps_s1: usize,
    #[arg(long, default_value_t = 50)]
    ddim_steps_s2: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optional JSON output of the reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InstrumentArgs {
    /// Trajectory-control checkpoint matching --repr.
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ReprArg::Simplified)]
    repr: ReprArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Lbfgs)]
    optimizer: OptimizerArg,
    /// Condition on the samples' prompts (off: unconditional mode).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    text: bool,
    /// Guidance component targets; defaults by representation
    /// (simplified: position, redundant: position-rotation-velocity).
    #[arg(long, value_enum)]
    targets: Option<TargetsArg>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::Ddpm)]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 50)]
    ddim_steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output trace CSV.
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

fn parse_joints(skeleton: &Skeleton, names: &str) -> Result<Vec<usize>, Error> {
    names
        .split(',')
        .map(|n| {
            let n = n.trim();
            skeleton
                .joint_names
                .iter()
                .position(|j| j == n)
                .ok_or_else(|| Error::Config(format!("unknown joint '{n}'")))
        })
        .collect()
}

fn load_model(path: &Path, stage: Stage) -> Result<LoadedModel, Error> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config.stage != stage {
        return Err(Error::Config(format!(
            "checkpoint at {} is not a {stage:?} model",
            path.display()
        )));
    }
    LoadedModel::from_checkpoint(&ckpt)
}

fn sampler_spec(kind: SamplerArg, s1: usize, s2: usize) -> SamplerSpec {
    match kind {
        SamplerArg::Ddpm => SamplerSpec::ddpm(),
        SamplerArg::Ddim => SamplerSpec::ddim(s1, s2),
    }
}

fn positions_csv(global: &GlobalMotion, skeleton: &Skeleton) -> String {
    let mut out = String::from("frame");
    for name in &skeleton.joint_names {
        out.push_str(&format!(",{name}_x,{name}_y,{name}_z"));
    }
    out.push('\n');
    for i in 0..global.frames() {
        out.push_str(&i.to_string());
        for k in 0..global.joint_count() {
            for d in 0..3 {
                out.push_str(&format!(",{}", global.positions[[i, k, d]]));
            }
        }
        out.push('\n');
    }
    out
}

fn print_report_table(rows: &[(String, EvalOutcome)]) {
    println!(
        "{:<12} {:>10} {:>8} {:>10} {:>11} {:>10} {:>10} {:>11} {:>10}",
        "config",
        "fid",
        "r@3",
        "diversity",
        "foot_skate",
        "traj_err%",
        "loc_err%",
        "avg_err_cm",
        "s/sample"
    );
    for (name, outcome) in rows {
        let r = &outcome.report;
        println!(
            "{:<12} {:>10.4} {:>8.3} {:>10.4} {:>11.4} {:>10.2} {:>10.2} {:>11.2} {:>10.2}",
            name,
            r.fid_proxy,
            r.r_precision_top_k[2],
            r.diversity,
            r.foot_skating_ratio,
            r.traj_err_pct,
            r.loc_err_pct,
            r.avg_err_cm,
            outcome.latency_s
        );
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthData(args) => {
            let config = DatasetConfig {
                samples_per_family: args.samples_per_family,
                max_frames: args.max_frames,
                fps: args.fps,
                seed: args.seed,
            };
            let dataset = build_dataset(&config)?;
            save_dataset(&dataset, &args.out)?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                dataset.train.len(),
                dataset.val.len(),
                dataset.test.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::TrainStage1(args) => {
            let dataset = load_dataset(&args.common.data)?;
            let layout = dataset.skeleton.layout();
            let repr: Representation = args.repr.into();
            let channels = match repr {
                Representation::Simplified => layout.simplified_channels(),
                Representation::Redundant => layout.redundant_channels(),
            };
            let model_cfg = DenoiserConfig::desk(Stage::TrajectoryControl, channels);
            let schedule = ScheduleConfig::with_steps(args.common.steps);
            let train_cfg = TrainConfig {
                iterations: args.common.iterations,
                batch_size: args.common.batch_size,
                ..TrainConfig::desk(args.common.iterations, args.common.seed)
            };
            let (model, norm, report) =
                train_stage1(&dataset, repr, model_cfg, schedule, &train_cfg)?;
            Checkpoint::from_denoiser(&model, schedule, norm).save(&args.common.out)?;
            if let Some(path) = &args.common.loss_csv {
                std::fs::write(path, report.to_csv())?;
            }
            println!(
                "stage-1 ({repr:?}) final loss {:.6}, checkpoint at {}",
                report.final_loss(),
                args.common.out.display()
            );
            Ok(())
        }
        Command::TrainStage2(args) => {
            let dataset = load_dataset(&args.common.data)?;
            let layout = dataset.skeleton.layout();
            let model_cfg =
                DenoiserConfig::desk(Stage::MotionCompletion, layout.redundant_channels());
            let schedule = ScheduleConfig::with_steps(args.common.steps);
            let train_cfg = TrainConfig {
                iterations: args.common.iterations,
                batch_size: args.common.batch_size,
                inpainting_mix: !args.no_inpainting_mix,
                ..TrainConfig::desk(args.common.iterations, args.common.seed)
            };
            let (model, norm, report) = train_stage2(&dataset, model_cfg, schedule, &train_cfg)?;
            Checkpoint::from_denoiser(&model, schedule, norm).save(&args.common.out)?;
            if let Some(path) = &args.common.loss_csv {
                std::fs::write(path, report.to_csv())?;
            }
            println!(
                "stage-2 final loss {:.6}, checkpoint at {}",
                report.final_loss(),
                args.common.out.display()
            );
            Ok(())
        }
        Command::TrainEmbedder(args) => {
            let dataset = load_dataset(&args.data)?;
            let embedder = train_embedder(
                &dataset,
                EmbedderConfig::desk(FEATURE_DIM),
                args.iterations,
                args.batch_size,
                args.seed,
            )?;
            let doc = EmbedderCheckpoint::from_embedder(&embedder);
            std::fs::write(&args.out, serde_json::to_string(&doc)?)?;
            println!("embedder checkpoint at {}", args.out.display());
            Ok(())
        }
        Command::Generate(args) => {
            let stage1 = load_model(&args.stage1, Stage::TrajectoryControl)?;
            let stage2 = load_model(&args.stage2, Stage::MotionCompletion)?;
            let skeleton = kinegen_core::toy_skeleton();
            let doc: TrajectoryJson =
                serde_json::from_str(&std::fs::read_to_string(&args.traj_file)?)?;
            let trajectory = TrajectorySpec::from_json(&doc, &skeleton)?;
            let req = GenerationRequest {
                prompt: args.prompt,
                trajectory,
                sampler: sampler_spec(args.sampler, args.ddim_steps_s1, args.ddim_steps_s2),
                seed: args.seed,
                ablation: args.ablation.into(),
                optimizer: args.optimizer.into(),
                targets: args.targets.into(),
            };
            let out = generate(&req, &stage1, &stage2, &skeleton)?;
            let motion_doc = out.motion.to_json(20, &skeleton);
            std::fs::write(&args.out, serde_json::to_string(&motion_doc)?)?;
            if let Some(path) = &args.positions_csv {
                std::fs::write(path, positions_csv(&out.global, &skeleton))?;
            }
            if let Some(path) = &args.trace_csv {
                std::fs::write(path, out.trace.to_csv())?;
            }
            println!(
                "wrote {} frames to {}; avg keyframe error {:.2} cm, foot skating {:.4}",
                out.motion.frames(),
                args.out.display(),
                out.metrics.avg_err_cm,
                out.metrics.foot_skating_ratio
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let stage1 = load_model(&args.stage1, Stage::TrajectoryControl)?;
            let stage2 = load_model(&args.stage2, Stage::MotionCompletion)?;
            let dataset: Dataset = load_dataset(&args.data)?;
            let split = parse_split(&args.split)?;
            let keyframes = match args.density.as_str() {
                "dense" => None,
                n => Some(n.parse::<usize>().map_err(|_| {
                    Error::Config(format!("density must be 'dense' or a count, got '{n}'"))
                })?),
            };
            let embedder = match &args.embedder {
                Some(path) => {
                    let doc: EmbedderCheckpoint =
                        serde_json::from_str(&std::fs::read_to_string(path)?)?;
                    Some(doc.into_embedder()?)
                }
                None => None,
            };
            let embedder_ref: Option<&dyn JointEmbedder> =
                embedder.as_ref().map(|e| e as &dyn JointEmbedder);
            let sampler = sampler_spec(args.sampler, args.ddim_steps_s1, args.ddim_steps_s2);
            let configs: Vec<(String, ControlConfig)> = match &args.joints {
                Some(names) => vec![(
                    names.clone(),
                    ControlConfig {
                        joints: parse_joints(&dataset.skeleton, names)?,
                        keyframes,
                    },
                )],
                None => control_configs(&dataset.skeleton)
                    .into_iter()
                    .map(|(name, mut c)| {
                        c.keyframes = keyframes.or(c.keyframes);
                        (name, c)
                    })
                    .collect(),
            };
            let mut rows = Vec::new();
            for (name, control) in configs {
                let outcome = evaluate(
                    &stage1,
                    &stage2,
                    &dataset,
                    split,
                    &control,
                    embedder_ref,
                    sampler,
                    args.seed,
                )?;
                rows.push((name, outcome));
            }
            print_report_table(&rows);
            if let Some(path) = &args.out {
                let json: Vec<_> = rows
                    .iter()
                    .map(|(name, o)| {
                        serde_json::json!({
                            "config": name,
                            "report": o.report,
                            "latency_s": o.latency_s,
                            "samples": o.samples,
                        })
                    })
                    .collect();
                std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
            }
            Ok(())
        }
        Command::Instrument(args) => {
            let stage1 = load_model(&args.stage1, Stage::TrajectoryControl)?;
            let dataset = load_dataset(&args.data)?;
            let layout = dataset.skeleton.layout();
            let repr: Representation = args.repr.into();
            let expected = match repr {
                Representation::Simplified => layout.simplified_channels(),
                Representation::Redundant => layout.redundant_channels(),
            };
            if stage1.denoiser.config.channels != expected {
                return Err(Error::Config(format!(
                    "checkpoint has {} channels but --repr expects {expected}",
                    stage1.denoiser.config.channels
                )));
            }
            let targets = args.targets.map(GuidanceTargets::from).unwrap_or(match repr {
                Representation::Simplified => GuidanceTargets::Position,
                Representation::Redundant => GuidanceTargets::PositionRotationVelocity,
            });
            let sampler = match args.sampler {
                SamplerArg::Ddpm => StageSampler::ddpm(),
                SamplerArg::Ddim => StageSampler::ddim(args.ddim_steps),
            };
            let config = InstrumentConfig {
                optimizer: args.optimizer.into(),
                with_text: args.text,
                targets,
                samples: args.samples,
                sampler,
                seed: args.seed,
            };
            let trace = instrument_trace(&stage1, &dataset, &config)?;
            std::fs::write(&args.out, trace.to_csv())?;
            println!(
                "{} steps x {} samples; mean per-step std: predicted {:.4}, guided {:.4}",
                trace.steps.len(),
                config.samples,
                trace.mean_predicted_std(),
                trace.mean_guided_std()
            );
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::TrainingDivergence(_) | Error::GuidanceDivergence(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
