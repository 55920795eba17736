//! Synthetic motion dataset: six scripted activity families with randomized
//! parameters, balanced disjoint splits, and normalization stats fit on the
//! train split only.
//!
//! Conventions inside the generators: heights in `j_p` are absolute (world
//! y), horizontal coordinates are root-relative in the facing frame, `j_v`
//! holds per-frame finite differences (frame 0 is zero), and `j_r` stays at
//! the identity rotation (the toy skeleton's rest offsets carry the pose).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fk::IDENTITY_6D;
use crate::motion::{derive_foot_contact, RedundantMotion};
use crate::norm::Normalization;
use crate::skeleton::{toy_skeleton, Skeleton};

pub const FOOT_CONTACT_VEL_THRESH: f64 = 0.03;
pub const FOOT_CONTACT_HEIGHT_THRESH: f64 = 0.12;

const REST_HEIGHT: f64 = 0.9;
const FOOT_GROUND: f64 = 0.05;
const GAIT_PERIOD: f64 = 20.0;

pub const FAMILIES: &[&str] = &[
    "walk_line",
    "walk_circle",
    "walk_and_raise_hand",
    "stand_wave",
    "jump_forward",
    "sit_down",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub samples_per_family: usize,
    /// Upper bound on frames per sample; actual lengths vary below it.
    pub max_frames: usize,
    pub fps: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { samples_per_family: 20, max_frames: 64, fps: 20, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct MotionSample {
    pub id: String,
    pub family: String,
    pub prompt: String,
    pub motion: RedundantMotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub fps: u32,
    pub train: Vec<MotionSample>,
    pub val: Vec<MotionSample>,
    pub test: Vec<MotionSample>,
    /// Per-channel stats over the redundant layout, train split only.
    pub norm: Normalization,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[MotionSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Scratch buffers a generator fills before assembly into a motion.
struct Script {
    frames: usize,
    r_a: Vec<f64>,
    step: Vec<f64>,
    height: Vec<f64>,
    /// Per-frame gait phase; drives the limb oscillation.
    phase: Vec<f64>,
    /// Extra right-wrist offsets on top of the base pose.
    rwrist_dx: Vec<f64>,
    rwrist_dy: Vec<f64>,
    /// Scales the leg swing; 0 plants both feet.
    stride_amp: f64,
    prompt: String,
}

impl Script {
    fn still(frames: usize, prompt: &str) -> Self {
        Self {
            frames,
            r_a: vec![0.0; frames],
            step: vec![0.0; frames],
            height: vec![REST_HEIGHT; frames],
            phase: vec![0.0; frames],
            rwrist_dx: vec![0.0; frames],
            rwrist_dy: vec![0.0; frames],
            stride_amp: 0.0,
            prompt: prompt.to_string(),
        }
    }
}

fn assemble(script: &Script, skeleton: &Skeleton) -> Result<RedundantMotion> {
    let f = script.frames;
    let j = skeleton.joint_count();
    let mut m = RedundantMotion::zeros(f, j);
    for i in 0..f {
        m.r_a[i] = script.r_a[i];
        m.r_xz[[i, 0]] = 0.0;
        m.r_xz[[i, 1]] = script.step[i];
        m.r_y[i] = script.height[i];
        let h = script.height[i];
        let phase = script.phase[i];
        let amp = script.stride_amp;
        // Stance feet move backward in the local frame at the walk speed, so
        // their world position roughly holds still.
        let (swing_l, lift_l) = (-(amp * phase.cos()), (phase.sin()).max(0.0));
        let (swing_r, lift_r) = ((amp * phase.cos()), (-phase.sin()).max(0.0));
        let arm = 0.3 * amp * phase.sin();
        // Local positions, joint order: spine, neck, head, lwrist, rwrist,
        // lfoot, rfoot (j_p row k-1 is joint k).
        let locals = [
            [0.0, h + 0.25, 0.0],
            [0.0, h + 0.50, 0.0],
            [0.0, h + 0.65, 0.0],
            [0.35, h + 0.55, -arm],
            [
                -0.35 + script.rwrist_dx[i],
                h + 0.55 + script.rwrist_dy[i],
                arm,
            ],
            [0.12, FOOT_GROUND + 0.10 * lift_l, swing_l],
            [-0.12, FOOT_GROUND + 0.10 * lift_r, swing_r],
        ];
        for k in 1..j {
            for d in 0..3 {
                m.j_p[[i, k - 1, d]] = locals[k - 1][d];
            }
        }
        for k in 0..j {
            for d in 0..6 {
                m.j_r[[i, k, d]] = IDENTITY_6D[d];
            }
        }
    }
    // Velocities: finite differences, frame 0 zero. Root uses its own
    // channels (local step and height change).
    for i in 1..f {
        m.j_v[[i, 0, 0]] = m.r_xz[[i, 0]];
        m.j_v[[i, 0, 1]] = m.r_y[i] - m.r_y[i - 1];
        m.j_v[[i, 0, 2]] = m.r_xz[[i, 1]];
        for k in 1..j {
            for d in 0..3 {
                m.j_v[[i, k, d]] = m.j_p[[i, k - 1, d]] - m.j_p[[i - 1, k - 1, d]];
            }
        }
    }
    let global = m.to_global(skeleton)?;
    m.c_f = derive_foot_contact(
        &global,
        skeleton,
        FOOT_CONTACT_VEL_THRESH,
        FOOT_CONTACT_HEIGHT_THRESH,
    )?;
    m.validate()?;
    Ok(m)
}

fn pace_word(speed: f64) -> &'static str {
    if speed < 0.045 {
        " slowly"
    } else if speed > 0.065 {
        " quickly"
    } else {
        ""
    }
}

fn gen_walk_line(rng: &mut impl Rng, frames: usize) -> Script {
    let speed = rng.gen_range(0.03..0.08);
    let mut s = Script::still(frames, "");
    s.prompt = format!("a person walks in a straight line{}", pace_word(speed));
    s.stride_amp = speed * GAIT_PERIOD / 4.0;
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    for i in 0..frames {
        s.step[i] = speed;
        s.phase[i] = phase0 + 2.0 * PI * i as f64 / GAIT_PERIOD;
        s.height[i] = REST_HEIGHT + 0.01 * (2.0 * s.phase[i]).sin();
    }
    s
}

fn gen_walk_circle(rng: &mut impl Rng, frames: usize) -> Script {
    let radius = rng.gen_range(0.6..1.5);
    let total_turn = rng.gen_range(PI..2.0 * PI) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let omega = total_turn / frames as f64;
    // Chord length putting every vertex of the walked polygon exactly on a
    // circle of the chosen radius.
    let step = 2.0 * radius * (omega.abs() / 2.0).sin();
    let mut s = Script::still(frames, "a person walks in a circle");
    s.stride_amp = step * GAIT_PERIOD / 4.0;
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    for i in 0..frames {
        s.r_a[i] = omega;
        s.step[i] = step;
        s.phase[i] = phase0 + 2.0 * PI * i as f64 / GAIT_PERIOD;
        s.height[i] = REST_HEIGHT + 0.01 * (2.0 * s.phase[i]).sin();
    }
    s
}

fn gen_walk_and_raise_hand(rng: &mut impl Rng, frames: usize) -> Script {
    let mut s = gen_walk_line(rng, frames);
    s.prompt = "a person walks and raises their hand".into();
    for i in 0..frames {
        // Smoothstep ramp from rest to overhead.
        let u = i as f64 / (frames - 1) as f64;
        let ramp = u * u * (3.0 - 2.0 * u);
        s.rwrist_dy[i] = 0.45 * ramp;
        s.rwrist_dx[i] = 0.15 * ramp;
    }
    s
}

fn gen_stand_wave(rng: &mut impl Rng, frames: usize) -> Script {
    let mut s = Script::still(frames, "a person stands and waves");
    let freq = rng.gen_range(1.5..3.0);
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    for i in 0..frames {
        let ph = phase0 + 2.0 * PI * freq * i as f64 / frames as f64;
        s.rwrist_dy[i] = 0.35;
        s.rwrist_dx[i] = 0.12 * ph.sin();
    }
    s
}

fn gen_jump_forward(rng: &mut impl Rng, frames: usize) -> Script {
    let mut s = Script::still(frames, "a person jumps forward");
    let hop = rng.gen_range(0.15..0.3);
    let reach = rng.gen_range(0.3..0.6);
    // Crouch for the first third, airborne for the middle, recover after.
    let crouch_end = frames / 3;
    let land = 2 * frames / 3;
    for i in 0..frames {
        if i < crouch_end {
            let u = i as f64 / crouch_end as f64;
            s.height[i] = REST_HEIGHT - 0.2 * u * u;
        } else if i < land {
            let u = (i - crouch_end) as f64 / (land - crouch_end) as f64;
            s.height[i] = REST_HEIGHT - 0.2 + (0.2 + hop) * (PI * u).sin();
            s.step[i] = reach / (land - crouch_end) as f64;
        } else {
            let u = (i - land) as f64 / (frames - land) as f64;
            s.height[i] = REST_HEIGHT - 0.1 * (1.0 - u);
        }
    }
    // Feet follow the root while airborne.
    for i in 0..frames {
        s.phase[i] = 0.0;
    }
    s
}

fn gen_sit_down(rng: &mut impl Rng, frames: usize) -> Script {
    let mut s = Script::still(frames, "a person sits down slowly");
    let seat = rng.gen_range(0.4..0.5);
    for i in 0..frames {
        let u = i as f64 / (frames - 1) as f64;
        let ramp = u * u * (3.0 - 2.0 * u);
        s.height[i] = REST_HEIGHT - (REST_HEIGHT - seat) * ramp;
    }
    s
}

fn generate_family(
    family: &str,
    rng: &mut impl Rng,
    frames: usize,
) -> Result<Script> {
    Ok(match family {
        "walk_line" => gen_walk_line(rng, frames),
        "walk_circle" => gen_walk_circle(rng, frames),
        "walk_and_raise_hand" => gen_walk_and_raise_hand(rng, frames),
        "stand_wave" => gen_stand_wave(rng, frames),
        "jump_forward" => gen_jump_forward(rng, frames),
        "sit_down" => gen_sit_down(rng, frames),
        other => return Err(Error::Config(format!("unknown family {other:?}"))),
    })
}

/// Generate one sample of a family. Public so instrumentation can draw
/// fresh motions outside a dataset.
pub fn generate_sample(
    family: &str,
    skeleton: &Skeleton,
    frames: usize,
    rng: &mut impl Rng,
) -> Result<(RedundantMotion, String)> {
    if frames < 16 {
        return Err(Error::Config(format!("need at least 16 frames, got {frames}")));
    }
    let script = generate_family(family, rng, frames)?;
    let motion = assemble(&script, skeleton)?;
    let prompt = script.prompt.clone();
    Ok((motion, prompt))
}

/// Build the full dataset: balanced per-family samples with varying lengths,
/// split 70/15/15 per family, stats fit on train only.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.samples_per_family < 7 {
        return Err(Error::Config(
            "need at least 7 samples per family for non-empty splits".into(),
        ));
    }
    if config.max_frames < 24 {
        return Err(Error::Config("max_frames must be at least 24".into()));
    }
    let skeleton = toy_skeleton();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for family in FAMILIES {
        let n = config.samples_per_family;
        let n_val = (n * 15 / 100).max(1);
        let n_test = (n * 15 / 100).max(1);
        for idx in 0..n {
            let frames = rng.gen_range(config.max_frames * 3 / 4..=config.max_frames);
            let (motion, prompt) = generate_sample(family, &skeleton, frames, &mut rng)?;
            let sample = MotionSample {
                id: format!("{family}_{idx:03}"),
                family: family.to_string(),
                prompt,
                motion,
            };
            // Deterministic interleaved split keeps every family balanced.
            if idx < n_val {
                val.push(sample);
            } else if idx < n_val + n_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    let tensors: Vec<Array2<f64>> = train.iter().map(|s| s.motion.to_tensor()).collect();
    let norm = Normalization::fit(&tensors)?;
    Ok(Dataset { skeleton, fps: config.fps, train, val, test, norm })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    family: String,
    prompt: String,
    split: Split,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    fps: u32,
    skeleton: Skeleton,
    norm: Normalization,
    entries: Vec<ManifestEntry>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("motions"))?;
    let mut entries = Vec::new();
    for (split, samples) in [
        (Split::Train, &dataset.train),
        (Split::Val, &dataset.val),
        (Split::Test, &dataset.test),
    ] {
        for s in samples {
            let file = format!("motions/{}.json", s.id);
            let doc = s.motion.to_json(dataset.fps, &dataset.skeleton);
            let f = std::fs::File::create(dir.join(&file))?;
            serde_json::to_writer(std::io::BufWriter::new(f), &doc)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                family: s.family.clone(),
                prompt: s.prompt.clone(),
                split,
                file,
            });
        }
    }
    let manifest = Manifest {
        fps: dataset.fps,
        skeleton: dataset.skeleton.clone(),
        norm: dataset.norm.clone(),
        entries,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(f))?;
    manifest.skeleton.validate()?;
    let mut dataset = Dataset {
        skeleton: manifest.skeleton,
        fps: manifest.fps,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        norm: manifest.norm,
    };
    for e in manifest.entries {
        let f = std::fs::File::open(dir.join(&e.file))?;
        let doc = serde_json::from_reader(std::io::BufReader::new(f))?;
        let motion = RedundantMotion::from_json(&doc)?;
        let sample =
            MotionSample { id: e.id, family: e.family, prompt: e.prompt, motion };
        match e.split {
            Split::Train => dataset.train.push(sample),
            Split::Val => dataset.val.push(sample),
            Split::Test => dataset.test.push(sample),
        }
    }
    Ok(dataset)
}

/// Group sample indices by family name.
pub fn family_index(samples: &[MotionSample]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        map.entry(s.family.clone()).or_default().push(i);
    }
    map
}
