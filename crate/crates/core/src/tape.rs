//! Minimal reverse-mode autodiff over `Array2<f64>` values.
//!
//! Enough for the sequence denoiser and the contrastive embedder: matmul,
//! elementwise arithmetic, row broadcasts, GELU, row softmax, row
//! normalization, column slicing/concat and a couple of scalar reductions.
//! Values are recorded on a tape; `backward` walks it in reverse.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    /// x (S x C) plus a (1 x C) row broadcast over every row.
    AddRow(usize, usize),
    MulRow(usize, usize),
    Gelu(usize),
    SoftmaxRows(usize),
    NormalizeRows(usize, f64),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    /// Mean of squared entries -> 1x1.
    MeanSq(usize),
    /// Sum of all entries -> 1x1.
    SumAll(usize),
    /// Externally computed scalar with a precomputed input gradient.
    ScalarFn(usize, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, v: VarId) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> VarId {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_row(&mut self, x: VarId, row: VarId) -> VarId {
        let value = &self.nodes[x.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(x.0, row.0))
    }

    pub fn mul_row(&mut self, x: VarId, row: VarId) -> VarId {
        let value = &self.nodes[x.0].value * &self.nodes[row.0].value;
        self.push(value, Op::MulRow(x.0, row.0))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.mapv(gelu);
        self.push(value, Op::Gelu(a.0))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn normalize_rows(&mut self, a: VarId, eps: f64) -> VarId {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sigma = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / sigma);
        }
        self.push(value, Op::NormalizeRows(a.0, eps))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let value = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a.0, start, end))
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let value = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a.0, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("compatible row counts");
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("compatible column counts");
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn mean_sq(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a.0].value;
        let n = x.len() as f64;
        let value = Array2::from_elem((1, 1), x.iter().map(|v| v * v).sum::<f64>() / n);
        self.push(value, Op::MeanSq(a.0))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a.0))
    }

    /// Record an externally evaluated scalar function of `a` whose gradient
    /// with respect to `a` was computed alongside the value.
    pub fn scalar_fn(&mut self, a: VarId, value: f64, grad: Array2<f64>) -> VarId {
        debug_assert_eq!(grad.raw_dim(), self.nodes[a.0].value.raw_dim());
        self.push(Array2::from_elem((1, 1), value), Op::ScalarFn(a.0, grad))
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Reverse pass from a 1x1 scalar root. Returns a gradient per node,
    /// indexable by `VarId`.
    pub fn backward(&self, root: VarId) -> Vec<Array2<f64>> {
        let mut grads: Vec<Array2<f64>> =
            self.nodes.iter().map(|n| Array2::zeros(n.value.raw_dim())).collect();
        grads[root.0] = Array2::from_elem((1, 1), 1.0);
        for i in (0..=root.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    grads[*a] += &ga;
                    grads[*b] += &gb;
                }
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::MulElem(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    grads[*a] += &ga;
                    grads[*b] += &gb;
                }
                Op::Scale(a, c) => {
                    grads[*a] += &(&g * *c);
                }
                Op::AddRow(x, row) => {
                    grads[*x] += &g;
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[*row] += &col_sum;
                }
                Op::MulRow(x, row) => {
                    let gx = &g * &self.nodes[*row].value;
                    grads[*x] += &gx;
                    let grow = (&g * &self.nodes[*x].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    grads[*row] += &grow;
                }
                Op::Gelu(a) => {
                    let gx = &g * &self.nodes[*a].value.mapv(gelu_grad);
                    grads[*a] += &gx;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 =
                            (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    grads[*a] += &gx;
                }
                Op::NormalizeRows(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[i].value;
                    let mut gx = Array2::zeros(x.raw_dim());
                    let n = x.ncols() as f64;
                    for r in 0..x.nrows() {
                        let mean = x.row(r).sum() / n;
                        let var =
                            x.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let sigma = (var + eps).sqrt();
                        let g_mean = g.row(r).sum() / n;
                        let gy_dot: f64 =
                            (0..x.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum::<f64>() / n;
                        for c in 0..x.ncols() {
                            gx[[r, c]] =
                                (g[[r, c]] - g_mean - y[[r, c]] * gy_dot) / sigma;
                        }
                    }
                    grads[*a] += &gx;
                }
                Op::Transpose(a) => {
                    grads[*a] += &g.t();
                }
                Op::SliceCols(a, start, end) => {
                    grads[*a].slice_mut(s![.., *start..*end]).zip_mut_with(&g, |d, s| *d += s);
                }
                Op::SliceRows(a, start, end) => {
                    grads[*a].slice_mut(s![*start..*end, ..]).zip_mut_with(&g, |d, s| *d += s);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let slice = g.slice(s![.., offset..offset + w]).to_owned();
                        grads[p] += &slice;
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.nodes[p].value.nrows();
                        let slice = g.slice(s![offset..offset + h, ..]).to_owned();
                        grads[p] += &slice;
                        offset += h;
                    }
                }
                Op::MeanSq(a) => {
                    let x = &self.nodes[*a].value;
                    let scale = 2.0 / x.len() as f64 * g[[0, 0]];
                    grads[*a] += &(x * scale);
                }
                Op::SumAll(a) => {
                    let gg = g[[0, 0]];
                    grads[*a].mapv_inplace(|v| v + gg);
                }
                Op::ScalarFn(a, grad_in) => {
                    grads[*a] += &(grad_in * g[[0, 0]]);
                }
            }
        }
        grads
    }
}
