//! Small contrastive text/motion embedder for the retrieval-precision proxy.
//!
//! Two 2-layer MLP branches map hand-crafted motion features and frozen
//! prompt embeddings into a shared unit-norm space, trained with a softmax
//! cross-entropy over in-batch pairings.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::extract_motion_features;
use crate::nn::{Adam, Linear, NamedTensor, ParamStore};
use crate::norm::Normalization;
use crate::tape::{Tape, VarId};
use crate::text::encode_text;

/// Maps motions (via their feature vectors) and prompts into a shared space.
/// The test suite substitutes constructed implementations.
pub trait JointEmbedder {
    fn embed_motion(&self, features: &Array1<f64>) -> Array1<f64>;
    fn embed_text(&self, prompt: &str) -> Array1<f64>;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub feature_dim: usize,
    pub text_embed_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl EmbedderConfig {
    pub fn desk(feature_dim: usize) -> Self {
        Self { feature_dim, text_embed_dim: 16, hidden: 32, embed_dim: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveEmbedder {
    pub config: EmbedderConfig,
    params: ParamStore,
    motion_l1: Linear,
    motion_l2: Linear,
    text_l1: Linear,
    text_l2: Linear,
    /// Feature stats from the training corpus; inputs are normalized with
    /// these before the motion branch.
    feature_norm: Normalization,
}

impl ContrastiveEmbedder {
    fn new(config: EmbedderConfig, feature_norm: Normalization, seed: u64) -> Result<Self> {
        if feature_norm.channels() != config.feature_dim {
            return Err(Error::Config("feature stats dimension mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let motion_l1 = Linear::new(&mut params, &mut rng, "motion.1", config.feature_dim, config.hidden);
        let motion_l2 = Linear::new(&mut params, &mut rng, "motion.2", config.hidden, config.embed_dim);
        let text_l1 = Linear::new(&mut params, &mut rng, "text.1", config.text_embed_dim, config.hidden);
        let text_l2 = Linear::new(&mut params, &mut rng, "text.2", config.hidden, config.embed_dim);
        Ok(Self { config, params, motion_l1, motion_l2, text_l1, text_l2, feature_norm })
    }

    fn branch(
        &self,
        tape: &mut Tape,
        binding: &crate::nn::ParamBinding,
        x: VarId,
        l1: &Linear,
        l2: &Linear,
    ) -> VarId {
        let h = l1.forward(tape, binding, x);
        let h = tape.gelu(h);
        let h = l2.forward(tape, binding, h);
        // Row standardization leaves a norm of sqrt(dim); rescale to unit norm.
        let h = tape.normalize_rows(h, 1e-8);
        tape.scale(h, 1.0 / (self.config.embed_dim as f64).sqrt())
    }

    fn run_branch(&self, input: Array2<f64>, motion: bool) -> Array2<f64> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let x = tape.leaf(input);
        let out = if motion {
            self.branch(&mut tape, &binding, x, &self.motion_l1, &self.motion_l2)
        } else {
            self.branch(&mut tape, &binding, x, &self.text_l1, &self.text_l2)
        };
        tape.value(out).clone()
    }
}

impl JointEmbedder for ContrastiveEmbedder {
    fn embed_motion(&self, features: &Array1<f64>) -> Array1<f64> {
        let row = Array2::from_shape_vec((1, features.len()), features.to_vec()).expect("row");
        let row = self.feature_norm.normalize(&row.view()).expect("feature dim");
        self.run_branch(row, true).row(0).to_owned()
    }

    fn embed_text(&self, prompt: &str) -> Array1<f64> {
        let e = encode_text(prompt, self.config.text_embed_dim).embedding;
        let row = Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("row");
        self.run_branch(row, false).row(0).to_owned()
    }
}

fn softmax_rows_plain(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Train the embedder on the dataset's train split.
pub fn train_embedder(
    dataset: &Dataset,
    config: EmbedderConfig,
    iterations: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ContrastiveEmbedder> {
    if dataset.train.len() < 2 || batch_size < 2 {
        return Err(Error::Data("contrastive training needs at least 2 samples per batch".into()));
    }
    let features: Vec<Array1<f64>> = dataset
        .train
        .iter()
        .map(|s| {
            let global = s.motion.to_global(&dataset.skeleton)?;
            Ok(extract_motion_features(&global))
        })
        .collect::<Result<_>>()?;
    if features[0].len() != config.feature_dim {
        return Err(Error::Config(format!(
            "feature dimension {} != configured {}",
            features[0].len(),
            config.feature_dim
        )));
    }
    let rows: Vec<Array2<f64>> = features
        .iter()
        .map(|f| Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row"))
        .collect();
    let feature_norm = Normalization::fit(&rows)?;
    let text_rows: Vec<Array1<f64>> = dataset
        .train
        .iter()
        .map(|s| encode_text(&s.prompt, config.text_embed_dim).embedding)
        .collect();

    let mut embedder = ContrastiveEmbedder::new(config, feature_norm, seed ^ 0x9d2c)?;
    let mut adam = Adam::new(&embedder.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Inverse softmax temperature for the in-batch score matrix.
    let temp = 5.0;

    for _ in 0..iterations {
        // Batch of distinct samples so identical prompts collide rarely.
        let mut idx: Vec<usize> = (0..dataset.train.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(batch_size);

        let mut feat = Array2::zeros((idx.len(), config.feature_dim));
        let mut text = Array2::zeros((idx.len(), config.text_embed_dim));
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..config.feature_dim {
                feat[[r, c]] = features[i][c];
            }
            for c in 0..config.text_embed_dim {
                text[[r, c]] = text_rows[i][c];
            }
        }
        let feat = embedder.feature_norm.normalize(&feat.view())?;

        let mut tape = Tape::new();
        let binding = embedder.params.bind(&mut tape);
        let f_in = tape.leaf(feat);
        let t_in = tape.leaf(text);
        let m = embedder.branch(&mut tape, &binding, f_in, &embedder.motion_l1, &embedder.motion_l2);
        let t = embedder.branch(&mut tape, &binding, t_in, &embedder.text_l1, &embedder.text_l2);
        let tt = tape.transpose(t);
        let scores = tape.matmul(m, tt);
        let scores = tape.scale(scores, temp);

        // Cross-entropy against the diagonal pairing, attached through its
        // closed-form gradient on the score matrix.
        let s = tape.value(scores).clone();
        let b = s.nrows();
        let probs = softmax_rows_plain(&s);
        let mut loss = 0.0;
        let mut grad = probs.clone();
        for i in 0..b {
            loss -= probs[[i, i]].max(1e-300).ln();
            grad[[i, i]] -= 1.0;
        }
        loss /= b as f64;
        grad.mapv_inplace(|g| g / b as f64);
        let loss_var = tape.scalar_fn(scores, loss, grad);

        let grads = tape.backward(loss_var);
        let param_grads = binding.gradients(&grads);
        adam.update(&mut embedder.params, &param_grads, 1e-3);
    }
    Ok(embedder)
}

/// Serialized embedder document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderCheckpoint {
    pub config: EmbedderConfig,
    pub feature_norm: Normalization,
    pub tensors: Vec<NamedTensor>,
}

impl EmbedderCheckpoint {
    pub fn from_embedder(e: &ContrastiveEmbedder) -> Self {
        Self {
            config: e.config,
            feature_norm: e.feature_norm.clone(),
            tensors: e.params.to_named_tensors(),
        }
    }

    pub fn into_embedder(self) -> Result<ContrastiveEmbedder> {
        let mut e = ContrastiveEmbedder::new(self.config, self.feature_norm, 0)?;
        e.params.load_named_tensors(&self.tensors)?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig};
    use crate::metrics::FEATURE_DIM;

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let ds = build_dataset(&DatasetConfig {
            samples_per_family: 7,
            max_frames: 24,
            fps: 20,
            seed: 2,
        })
        .unwrap();
        let e = train_embedder(&ds, EmbedderConfig::desk(FEATURE_DIM), 20, 8, 1).unwrap();
        let g = ds.train[0].motion.to_global(&ds.skeleton).unwrap();
        let f = extract_motion_features(&g);
        let a = e.embed_motion(&f);
        let b = e.embed_motion(&f);
        assert_eq!(a, b);
        let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        let t = e.embed_text("a person walks in a circle");
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nt - 1.0).abs() < 1e-6);
    }

    #[test]
    fn training_aligns_matching_pairs() {
        let ds = build_dataset(&DatasetConfig {
            samples_per_family: 8,
            max_frames: 24,
            fps: 20,
            seed: 3,
        })
        .unwrap();
        let e = train_embedder(&ds, EmbedderConfig::desk(FEATURE_DIM), 400, 12, 4).unwrap();
        // Matched pairs should be closer than mismatched family pairs on
        // average over the val split.
        let mut matched = Vec::new();
        let mut mismatched = Vec::new();
        for (i, s) in ds.val.iter().enumerate() {
            let g = s.motion.to_global(&ds.skeleton).unwrap();
            let me = e.embed_motion(&extract_motion_features(&g));
            for (jdx, other) in ds.val.iter().enumerate() {
                let te = e.embed_text(&other.prompt);
                let d = me
                    .iter()
                    .zip(te.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if i == jdx {
                    matched.push(d);
                } else if other.family != s.family {
                    mismatched.push(d);
                }
            }
        }
        let m = matched.iter().sum::<f64>() / matched.len() as f64;
        let mm = mismatched.iter().sum::<f64>() / mismatched.len() as f64;
        assert!(m < mm, "matched {m} >= mismatched {mm}");
    }

    #[test]
    fn checkpoint_round_trips() {
        let ds = build_dataset(&DatasetConfig {
            samples_per_family: 7,
            max_frames: 24,
            fps: 20,
            seed: 5,
        })
        .unwrap();
        let e = train_embedder(&ds, EmbedderConfig::desk(FEATURE_DIM), 10, 8, 6).unwrap();
        let doc = EmbedderCheckpoint::from_embedder(&e);
        let text = serde_json::to_string(&doc).unwrap();
        let back: EmbedderCheckpoint = serde_json::from_str(&text).unwrap();
        let restored = back.into_embedder().unwrap();
        let t1 = e.embed_text("a person jumps forward");
        let t2 = restored.embed_text("a person jumps forward");
        assert_eq!(t1, t2);
    }
}
