//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! trainable (`param`) or constant; gradients are only propagated through
//! nodes that depend on a trainable leaf.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization of the chain-graph adjacency (no self loops).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainNorm {
    /// D^{-1/2} A D^{-1/2}
    Symmetric,
    /// D^{-1} A
    RowStochastic,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    DepthwiseConv { x: Var, kernel: Var },
    ChainMix(Var, ChainNorm),
    ColMax { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    NormalizeRows(Var),
    SumAll(Var),
    BceLogits { logits: Var, targets: Matrix },
    Penalty { x: Var, local_grad: Matrix },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every graph node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the 1×n row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        self.push(value, Op::AddRow(x, b), rg)
    }

    /// Multiplies every row of `x` elementwise by the 1×n row `g`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let value = self.value(x) * self.value(g);
        let rg = self.rg(x) || self.rg(g);
        self.push(value, Op::MulRow(x, g), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by the 1×1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let value = self.value(x) * self.scalar(s);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::ScaleBy(x, s), rg)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 - v);
        let rg = self.rg(x);
        self.push(value, Op::OneMinus(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let n = value.ncols() as f64;
        let mut inv_std = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(value, Op::LayerNormRows { x, inv_std }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Depthwise 1D convolution along rows (the sequence axis) with zero
    /// "same" padding. `kernel` is channels × k with k odd.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Var {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (seq, ch) = xv.dim();
        let k = kv.ncols();
        let pad = k / 2;
        let mut out = Matrix::zeros((seq, ch));
        for t in 0..k {
            for s_out in 0..seq {
                let src = s_out as isize + t as isize - pad as isize;
                if src < 0 || src >= seq as isize {
                    continue;
                }
                let xrow = xv.row(src as usize);
                let mut orow = out.row_mut(s_out);
                for c in 0..ch {
                    orow[c] += kv[[c, t]] * xrow[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        self.push(out, Op::DepthwiseConv { x, kernel }, rg)
    }

    /// `A · x` for the normalized chain adjacency over the rows of `x`.
    pub fn chain_mix(&mut self, x: Var, norm: ChainNorm) -> Var {
        let value = chain_apply(self.value(x), norm, false);
        let rg = self.rg(x);
        self.push(value, Op::ChainMix(x, norm), rg)
    }

    /// Column-wise max, as a 1×n row.
    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut argmax = Vec::with_capacity(xv.ncols());
        let mut value = Matrix::zeros((1, xv.ncols()));
        for (c, col) in xv.columns().into_iter().enumerate() {
            let mut best = 0;
            for (j, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = j;
                }
            }
            argmax.push(best);
            value[[0, c]] = col[best];
        }
        let rg = self.rg(x);
        self.push(value, Op::ColMax { x, argmax }, rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Binary cross entropy of a 1×1 logit against a 0/1 target.
    pub fn bce_logit(&mut self, logit: Var, target: f64) -> Var {
        self.bce_logits(logit, Matrix::from_elem((1, 1), target))
    }

    /// Mean binary cross entropy of a matrix of logits against same-shaped
    /// 0/1 targets.
    pub fn bce_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim(), "bce_logits target shape");
        let total: f64 = z.iter().zip(targets.iter()).map(|(&z, &t)| softplus(z) - t * z).sum();
        let value = Matrix::from_elem((1, 1), total / z.len() as f64);
        let rg = self.rg(logits);
        self.push(value, Op::BceLogits { logits, targets }, rg)
    }

    /// A scalar term whose value and gradient with respect to `x` were
    /// computed outside the graph. Anything else the caller used to compute
    /// them is treated as a constant.
    pub fn penalty(&mut self, x: Var, value: f64, local_grad: Matrix) -> Var {
        assert_eq!(local_grad.dim(), self.shape(x), "penalty gradient shape");
        let rg = self.rg(x);
        self.push(Matrix::from_elem((1, 1), value), Op::Penalty { x, local_grad }, rg)
    }

    /// Reverse pass from a 1×1 `output`, seeded with `upstream`.
    pub fn backward(&self, output: Var, upstream: f64) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Validation("backward: output is not part of this graph".into()));
        }
        if self.shape(output) != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_elem((1, 1), upstream));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, gm) => {
                if self.rg(*x) {
                    acc(*x, g * self.value(*gm));
                }
                if self.rg(*gm) {
                    acc(*gm, (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::ScaleBy(x, sv) => {
                if self.rg(*x) {
                    acc(*x, g * self.scalar(*sv));
                }
                if self.rg(*sv) {
                    acc(*sv, Matrix::from_elem((1, 1), (g * self.value(*x)).sum()));
                }
            }
            Op::OneMinus(x) => acc(*x, -g),
            Op::Tanh(x) => acc(*x, g * &node.value.mapv(|y| 1.0 - y * y)),
            Op::Sigmoid(x) => acc(*x, g * &node.value.mapv(|y| y * (1.0 - y))),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &yy| *d -= yy * dot);
                }
                acc(*x, dx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = &node.value;
                let n = y.ncols() as f64;
                let mut dx = Matrix::zeros(y.dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    let sum_g = grow.sum();
                    let sum_gy = grow.dot(&yrow);
                    for c in 0..y.ncols() {
                        dx[[r, c]] = inv / n * (n * grow[c] - sum_g - yrow[c] * sum_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::SliceRows(x, start) => {
                let mut dx = Matrix::zeros(self.shape(*x));
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let mut dx = Matrix::zeros(self.shape(*x));
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.rg(p) {
                        acc(p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.rg(p) {
                        acc(p, g.slice(s![.., offset..offset + cols]).to_owned());
                    }
                    offset += cols;
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (seq, ch) = xv.dim();
                let k = kv.ncols();
                let pad = k / 2;
                let mut dx = Matrix::zeros((seq, ch));
                let mut dk = Matrix::zeros((ch, k));
                for t in 0..k {
                    for s_out in 0..seq {
                        let src = s_out as isize + t as isize - pad as isize;
                        if src < 0 || src >= seq as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..ch {
                            let go = g[[s_out, c]];
                            dx[[src, c]] += kv[[c, t]] * go;
                            dk[[c, t]] += xv[[src, c]] * go;
                        }
                    }
                }
                acc(*x, dx);
                acc(*kernel, dk);
            }
            Op::ChainMix(x, norm) => acc(*x, chain_apply(g, *norm, true)),
            Op::ColMax { x, argmax } => {
                let mut dx = Matrix::zeros(self.shape(*x));
                for (c, &j) in argmax.iter().enumerate() {
                    dx[[j, c]] += g[[0, c]];
                }
                acc(*x, dx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros((rows, cols));
                for mut row in dx.rows_mut() {
                    row.assign(&(g.row(0).to_owned() / rows as f64));
                }
                acc(*x, dx);
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let mut dx = Matrix::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let total = xv.row(r).sum();
                    let gy = g.row(r).dot(&y.row(r));
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = (g[[r, c]] - gy) / total;
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => acc(*x, Matrix::from_elem(self.shape(*x), g[[0, 0]])),
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g[[0, 0]] / z.len() as f64;
                let mut dz = z.mapv(sigmoid);
                dz.zip_mut_with(targets, |d, &t| *d = (*d - t) * scale);
                acc(*logits, dz);
            }
            Op::Penalty { x, local_grad } => acc(*x, local_grad * g[[0, 0]]),
        }
    }
}

/// Neighbour weights of row `i` in a chain of `n` nodes.
fn chain_weight(i: usize, j: usize, n: usize, norm: ChainNorm) -> f64 {
    let deg = |k: usize| -> f64 {
        if n == 1 {
            0.0
        } else if k == 0 || k == n - 1 {
            1.0
        } else {
            2.0
        }
    };
    match norm {
        ChainNorm::Symmetric => 1.0 / (deg(i) * deg(j)).sqrt(),
        ChainNorm::RowStochastic => 1.0 / deg(i),
    }
}

/// `A · x`, or `Aᵀ · x` when `transpose` is set.
pub fn chain_apply(x: &Matrix, norm: ChainNorm, transpose: bool) -> Matrix {
    let n = x.nrows();
    let mut out = Matrix::zeros(x.dim());
    for i in 0..n {
        for j in [i.wrapping_sub(1), i + 1] {
            if j >= n {
                continue;
            }
            let w = if transpose {
                chain_weight(j, i, n, norm)
            } else {
                chain_weight(i, j, n, norm)
            };
            let src = x.row(j);
            out.row_mut(i).scaled_add(w, &src);
        }
    }
    out
}

/// Dense chain adjacency, for tests and inspection.
pub fn chain_matrix(n: usize, norm: ChainNorm) -> Matrix {
    chain_apply(&Matrix::eye(n), norm, false)
}
