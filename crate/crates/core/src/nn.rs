//! Parameter store, transformer building blocks and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors for a model. Layers hold `ParamId`s into this.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Put every parameter on the tape as a leaf; returns ids aligned with
    /// `ParamId`. Call once per forward pass.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Serialize to a named-tensor document.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, value)| NamedTensor {
                name: name.clone(),
                shape: [value.nrows(), value.ncols()],
                data: value.iter().cloned().collect(),
            })
            .collect()
    }

    /// Load values (matched by order and name) from a named-tensor document.
    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {} name mismatch: expected {}, found {}",
                    i, self.names[i], t.name
                )));
            }
            if t.shape != [self.values[i].nrows(), self.values[i].ncols()]
                || t.data.len() != t.shape[0] * t.shape[1]
            {
                return Err(Error::Checkpoint(format!("tensor {} shape mismatch", t.name)));
            }
            self.values[i] =
                Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                    .expect("shape checked above");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Tape variables for one forward pass, aligned with the store.
pub struct ParamBinding {
    vars: Vec<VarId>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0]
    }

    /// Read the accumulated gradient for each parameter off a backward pass.
    pub fn gradients(&self, grads: &[Array2<f64>]) -> Vec<Array2<f64>> {
        self.vars.iter().map(|v| grads[v.0].clone()).collect()
    }
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), xavier(rng, input, output));
        let b = store.add(&format!("{name}.b"), Array2::zeros((1, output)));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &ParamBinding, x: VarId) -> VarId {
        let h = tape.matmul(x, binding.var(self.w));
        tape.add_row(h, binding.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Array2::ones((1, width)));
        let beta = store.add(&format!("{name}.beta"), Array2::zeros((1, width)));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &ParamBinding, x: VarId) -> VarId {
        let n = tape.normalize_rows(x, 1e-5);
        let n = tape.mul_row(n, binding.var(self.gamma));
        tape.add_row(n, binding.var(self.beta))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must be divisible by heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), width, width),
            wk: Linear::new(store, rng, &format!("{name}.k"), width, width),
            wv: Linear::new(store, rng, &format!("{name}.v"), width, width),
            wo: Linear::new(store, rng, &format!("{name}.o"), width, width),
            heads,
            width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &ParamBinding, x: VarId) -> VarId {
        let q = self.wq.forward(tape, binding, x);
        let k = self.wk.forward(tape, binding, x);
        let v = self.wv.forward(tape, binding, x);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outputs.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&outputs);
        self.wo.forward(tape, binding, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w1: Linear::new(store, rng, &format!("{name}.fc1"), width, hidden),
            w2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &ParamBinding, x: VarId) -> VarId {
        let h = self.w1.forward(tape, binding, x);
        let h = tape.gelu(h);
        self.w2.forward(tape, binding, h)
    }
}

/// Pre-LN transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), width, 4 * width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &ParamBinding, x: VarId) -> VarId {
        let n = self.ln1.forward(tape, binding, x);
        let a = self.attn.forward(tape, binding, n);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, binding, x);
        let f = self.ff.forward(tape, binding, n);
        tape.add(x, f)
    }
}

/// Sinusoidal features for a scalar position or timestep.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Adam with decoupled step-size control (the learning rate is supplied per
/// step so schedules stay outside the optimizer).
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: store.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            self.m[i] = &self.m[i] * self.beta1 + &grads[i] * (1.0 - self.beta1);
            self.v[i] =
                &self.v[i] * self.beta2 + &grads[i].mapv(|g| g * g) * (1.0 - self.beta2);
            let p = store.get_mut(ParamId(i));
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "l0", 16, 4);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(Array2::from_shape_fn((5, 16), |(i, j)| {
            ((i * 16 + j) as f64).sin()
        }));
        let y = layer.forward(&mut tape, &binding, x);
        assert_eq!(tape.value(y).shape(), &[5, 16]);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Array2::from_elem((1, 3), 5.0));
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let grads = vec![store.get(p).mapv(|x| 2.0 * x)];
            adam.update(&mut store, &grads, 0.05);
        }
        assert!(store.get(p).iter().all(|&x| x.abs() < 1e-2));
    }

    #[test]
    fn named_tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, &mut rng, "fc", 3, 4);
        let doc = store.to_named_tensors();
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let mut other = ParamStore::new();
        Linear::new(&mut other, &mut rng2, "fc", 3, 4);
        other.load_named_tensors(&doc).unwrap();
        assert_eq!(store.values(), other.values());

        let mut wrong = ParamStore::new();
        Linear::new(&mut wrong, &mut rng2, "other", 3, 4);
        assert!(wrong.load_named_tensors(&doc).is_err());
    }
}
