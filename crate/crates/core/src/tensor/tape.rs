use std::collections::HashMap;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{axis_split, concat_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// a · bᵀ
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    ScaleBy { x: Var, s: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Gelu { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MeanRows { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    NormalizeRows { x: Var, norms: Vec<T> },
    FillDiagonal { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T>, scale: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Wengert list of executed operations. Nodes are appended in execution
/// order and `backward` walks them in exact reverse.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    pub(crate) bound: HashMap<(u64, usize), Var>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            values: g.clone(),
        })
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(
            !value.values.iter().any(|v| v.is_nan()),
            "NaN produced by {op:?}"
        );
        debug_assert!(
            value.is_finite()
                || matches!(op, Op::FillDiagonal { .. })
                || inputs.iter().any(|i| !self.nodes[i.0].value.is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Validation(format!(
                "{op} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], values: out }, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// a · bᵀ for a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], values: out }, Op::MatMulNt { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).values();
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![cols, rows], values: out }, Op::Transpose { x, rows, cols }, &[x]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, values }, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add { a, b }, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub { a, b }, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul { a, b }, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            values: v.values.iter().map(|&e| e * c).collect(),
        };
        self.push(out, Op::Scale { x, c }, &[x])
    }

    fn row_operand(&self, x: Var, row: Var, op: &'static str) -> Result<usize> {
        let cols = *self.shape(x).last().expect("rank >= 1");
        if self.value(row).len() != cols {
            return Err(Error::dim(op, self.shape(x), self.shape(row)));
        }
        Ok(cols)
    }

    /// x + row, broadcasting `row` over every slice of the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "add_row")?;
        let r = self.value(row).values();
        let v = self.value(x);
        let values = v
            .values
            .iter()
            .enumerate()
            .map(|(i, &e)| e + r[i % cols])
            .collect();
        let shape = v.shape.clone();
        Ok(self.push(Tensor { shape, values }, Op::AddRow { x, row }, &[x, row]))
    }

    /// x ⊙ row, broadcasting `row` over every slice of the last axis.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "mul_row")?;
        let r = self.value(row).values();
        let v = self.value(x);
        let values = v
            .values
            .iter()
            .enumerate()
            .map(|(i, &e)| e * r[i % cols])
            .collect();
        let shape = v.shape.clone();
        Ok(self.push(Tensor { shape, values }, Op::MulRow { x, row }, &[x, row]))
    }

    /// x scaled by the single element held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).values[0];
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            values: v.values.iter().map(|&e| e * c).collect(),
        };
        Ok(self.push(out, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Softmax along `axis`, max-subtracted. `-inf` entries get exactly
    /// zero probability; a slice that is entirely `-inf` becomes uniform.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Validation(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(x).values();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * dim * inner + j * inner + i;
                let max = (0..dim).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    let u = T::one() / T::from_f64(dim as f64);
                    (0..dim).for_each(|j| out[idx(j)] = u);
                    continue;
                }
                let mut total = T::zero();
                for j in 0..dim {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..dim {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        Ok(self.push(Tensor { shape, values: out }, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalises each slice of the last axis to zero mean and unit
    /// variance (biased), with `eps` inside the square root. No affine part.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.rows_cols();
        let n = T::from_f64(cols as f64);
        let mut out = vec![T::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.values[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for (o, &e) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (e - mean) * s;
            }
            inv_std.push(s);
        }
        let shape = v.shape.clone();
        self.push(Tensor { shape, values: out }, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Tanh approximation of x·Φ(x).
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let values = v
            .values
            .iter()
            .map(|&e| half * e * (T::one() + (c * (e + a * e * e * e)).tanh()))
            .collect();
        let shape = v.shape.clone();
        self.push(Tensor { shape, values }, Op::Gelu { x }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        concat_shape(tensors.iter().map(|t| t.shape()), axis)?;
        let out = Tensor::concat(&tensors, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Mean over all rows (slices of the last axis) → vector of the last dim.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.rows_cols();
        let mut acc = vec![T::zero(); cols];
        for r in 0..rows {
            for (a, &e) in acc.iter_mut().zip(&v.values[r * cols..(r + 1) * cols]) {
                *a = *a + e;
            }
        }
        let inv = T::one() / T::from_f64(rows as f64);
        let values = acc.into_iter().map(|a| a * inv).collect();
        self.push(Tensor { shape: vec![cols], values }, Op::MeanRows { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).values.iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Scales each row (slice of the last axis) to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.rows_cols();
        let floor = T::from_f64(1e-12);
        let mut out = v.values.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = dot(row, row).sqrt().max(floor);
            row.iter_mut().for_each(|e| *e = *e / norm);
            norms.push(norm);
        }
        let shape = v.shape.clone();
        self.push(Tensor { shape, values: out }, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Overwrites the diagonal of a square matrix with `value`.
    pub fn fill_diagonal(&mut self, x: Var, value: T) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "fill_diagonal")?;
        if r != c {
            return Err(Error::dim("fill_diagonal", &[r, c], &[c, r]));
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            out.values[i * c + i] = value;
        }
        Ok(self.push(out, Op::FillDiagonal { x }, &[x]))
    }

    /// Cross-entropy of row-wise softmax(logits) against class indices,
    /// via log-sum-exp. `-inf` logits are excluded from the partition sum.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (b, k) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Validation(format!(
                "{} labels for {b} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let src = self.value(logits).values();
        let mut probs = vec![T::zero(); b * k];
        let mut total = 0.0f64;
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &e) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (e - max).exp();
                z = z + *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            // (max - x_label) is exactly zero when the label holds the max
            total += (max - row[labels[r]]).as_f64() + z.ln().as_f64();
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / b as f64,
            Reduction::Sum => 1.0,
        };
        let loss = Tensor::scalar(T::from_f64(total * scale));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            scale: T::from_f64(scale),
        };
        Ok(self.push(loss, op, &[logits]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.len()]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, target: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let mut buf = self.nodes[target.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![T::zero(); len]);
        f(&mut buf, &self.nodes);
        self.nodes[target.0].grad = Some(buf);
    }

    fn backprop_node(&mut self, out: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                self.acc(a, |ga, nodes| gemm_nt(g, nodes[b.0].value.values(), ga, m, n, k));
                self.acc(b, |gb, nodes| gemm_tn(nodes[a.0].value.values(), g, gb, m, k, n));
            }
            Op::MatMulNt { a, b, m, k, n } => {
                self.acc(a, |ga, nodes| gemm_nn(g, nodes[b.0].value.values(), ga, m, n, k));
                self.acc(b, |gb, nodes| gemm_tn(g, nodes[a.0].value.values(), gb, m, n, k));
            }
            Op::Transpose { x, rows, cols } => self.acc(x, |gx, _| {
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] = gx[i * cols + j] + g[j * rows + i];
                    }
                }
            }),
            Op::Add { a, b } => {
                self.acc(a, |ga, _| add_into(ga, g));
                self.acc(b, |gb, _| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc(a, |ga, _| add_into(ga, g));
                self.acc(b, |gb, _| {
                    gb.iter_mut().zip(g).for_each(|(d, &e)| *d = *d - e)
                });
            }
            Op::Mul { a, b } => {
                self.acc(a, |ga, nodes| {
                    for ((d, &e), &y) in ga.iter_mut().zip(g).zip(nodes[b.0].value.values()) {
                        *d = *d + e * y;
                    }
                });
                self.acc(b, |gb, nodes| {
                    for ((d, &e), &y) in gb.iter_mut().zip(g).zip(nodes[a.0].value.values()) {
                        *d = *d + e * y;
                    }
                });
            }
            Op::Scale { x, c } => self.acc(x, |gx, _| {
                gx.iter_mut().zip(g).for_each(|(d, &e)| *d = *d + e * c)
            }),
            Op::AddRow { x, row } => {
                self.acc(x, |gx, _| add_into(gx, g));
                self.acc(row, |gr, _| {
                    let cols = gr.len();
                    for (i, &e) in g.iter().enumerate() {
                        gr[i % cols] = gr[i % cols] + e;
                    }
                });
            }
            Op::MulRow { x, row } => {
                self.acc(x, |gx, nodes| {
                    let r = nodes[row.0].value.values();
                    let cols = r.len();
                    for (i, (d, &e)) in gx.iter_mut().zip(g).enumerate() {
                        *d = *d + e * r[i % cols];
                    }
                });
                self.acc(row, |gr, nodes| {
                    let xv = nodes[x.0].value.values();
                    let cols = gr.len();
                    for (i, (&e, &xe)) in g.iter().zip(xv).enumerate() {
                        gr[i % cols] = gr[i % cols] + e * xe;
                    }
                });
            }
            Op::ScaleBy { x, s } => {
                self.acc(x, |gx, nodes| {
                    let c = nodes[s.0].value.values()[0];
                    gx.iter_mut().zip(g).for_each(|(d, &e)| *d = *d + e * c)
                });
                self.acc(s, |gs, nodes| {
                    gs[0] = gs[0] + dot(g, nodes[x.0].value.values());
                });
            }
            Op::Softmax { x, axis } => self.acc(x, |gx, nodes| {
                let y = &nodes[out].value;
                let (outer, dim, inner) = axis_split(y.shape(), axis);
                let yv = y.values();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * dim * inner + j * inner + i;
                        let s = (0..dim).map(|j| g[idx(j)] * yv[idx(j)]).sum::<T>();
                        for j in 0..dim {
                            gx[idx(j)] = gx[idx(j)] + yv[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            }),
            Op::LayerNorm { x, ref inv_std } => self.acc(x, |gx, nodes| {
                let xhat = &nodes[out].value;
                let (rows, cols) = xhat.rows_cols();
                let n = T::from_f64(cols as f64);
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gr = &g[span.clone()];
                    let hr = &xhat.values()[span.clone()];
                    let sum_g = gr.iter().copied().sum::<T>();
                    let sum_gh = dot(gr, hr);
                    let k = inv_std[r] / n;
                    for ((d, &ge), &he) in gx[span].iter_mut().zip(gr).zip(hr) {
                        *d = *d + k * (n * ge - sum_g - he * sum_gh);
                    }
                }
            }),
            Op::Gelu { x } => self.acc(x, |gx, nodes| {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                for ((d, &e), &xe) in gx.iter_mut().zip(g).zip(nodes[x.0].value.values()) {
                    let u = c * (xe + a * xe * xe * xe);
                    let t = u.tanh();
                    let du = c * (T::one() + three * a * xe * xe);
                    let deriv = half * (T::one() + t) + half * xe * (T::one() - t * t) * du;
                    *d = *d + e * deriv;
                }
            }),
            Op::Concat { ref parts, axis } => {
                let out_shape = self.nodes[out].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    self.acc(p, |gp, _| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let len = self.nodes[out].value.shape()[axis];
                self.acc(x, |gx, nodes| {
                    let (outer, dim, inner) = axis_split(nodes[x.0].value.shape(), axis);
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::MeanRows { x } => self.acc(x, |gx, _| {
                let cols = g.len();
                let rows = gx.len() / cols;
                let inv = T::one() / T::from_f64(rows as f64);
                for (i, d) in gx.iter_mut().enumerate() {
                    *d = *d + g[i % cols] * inv;
                }
            }),
            Op::Sum { x } => self.acc(x, |gx, _| gx.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Reshape { x } => self.acc(x, |gx, _| add_into(gx, g)),
            Op::NormalizeRows { x, ref norms } => self.acc(x, |gx, nodes| {
                let y = &nodes[out].value;
                let (rows, cols) = y.rows_cols();
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let yr = &y.values()[span.clone()];
                    let gr = &g[span.clone()];
                    let proj = dot(yr, gr);
                    for ((d, &ge), &ye) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *d = *d + (ge - ye * proj) / norms[r];
                    }
                }
            }),
            Op::FillDiagonal { x } => self.acc(x, |gx, _| {
                let n = (g.len() as f64).sqrt() as usize;
                for (i, (d, &e)) in gx.iter_mut().zip(g).enumerate() {
                    if i / n != i % n {
                        *d = *d + e;
                    }
                }
            }),
            Op::CrossEntropy { logits, ref labels, ref probs, scale } => self.acc(logits, |gl, _| {
                let k = probs.len() / labels.len();
                let s = g[0] * scale;
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { T::one() } else { T::zero() };
                        gl[r * k + j] = gl[r * k + j] + s * (probs[r * k + j] - target);
                    }
                }
            }),
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}
