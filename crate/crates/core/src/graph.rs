//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only record of primitive operations. Each call
//! evaluates the operation eagerly, stores the result, and remembers enough
//! to propagate gradients later. Because a node can only reference nodes
//! created before it, insertion order is already a topological order and
//! [`Graph::backward`] walks the record once in reverse.
//!
//! ```
//! use dln::graph::Graph;
//! use dln::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0));
//! let y = g.scale(x, 3.0).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 3.0);
//! ```

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tags accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        input: Var,
        group: usize,
        inv_sigma: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    TileRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: Cell<bool>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
///
/// Every leaf that requires gradients has an entry; leaves the output does
/// not depend on get an exactly-zero tensor.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn checked(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = A B` with `A: [m, k]`, `B: [k, n]`.
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `C = A Bᵀ` with `A: [m, k]`, `B: [n, k]`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C = Aᵀ B` with `A: [m, k]`, `B: [m, n]`.
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in c[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn matrix_dims(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        let t = self.value(var);
        if t.shape().len() > 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a: [m, k]` times `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let c = mm_nn(self.value(a).data(), m, k, self.value(b).data(), n);
        let out = checked("matmul", Tensor::new(vec![m, n], c)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a: [m, k]` times the transpose of `b: [n, k]`. Weight matrices are
    /// stored `[out, in]`, so this is the natural product for row-major
    /// batches of inputs.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_t", a)?;
        let (n, k2) = self.matrix_dims("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.value(a), self.value(b)));
        }
        let c = mm_nt(self.value(a).data(), m, k, self.value(b).data(), n);
        let out = checked("matmul_t", Tensor::new(vec![m, n], c)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        checked(name, like(ta, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() || tr.shape().len() > 2 {
            return Err(shape_err(name, ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % c]))
            .collect();
        checked(name, like(ta, data))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = checked("scale", self.value(a).map(|x| x * s))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = checked("tanh", self.value(a).map(f64::tanh))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Tanh(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = checked("sigmoid", self.value(a).map(sigmoid))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sigmoid(a), rg))
    }

    /// Tag-dispatched form of the value-wise primitives.
    pub fn elementwise(&mut self, tag: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::InvalidArgument(format!("{tag:?} needs two operands")))
        };
        match tag {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Sub => self.sub(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::Sigmoid => self.sigmoid(a),
        }
    }

    /// Normalizes each consecutive run of `group` columns in every row to
    /// zero mean and unit variance, with `sqrt(var + eps)` as the divisor.
    pub fn layer_norm(&mut self, a: Var, group: usize, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if group == 0 || !cols.is_multiple_of(group) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm group {group} does not divide {cols} columns"
            )));
        }
        let mut out = t.data().to_vec();
        let mut inv_sigma = Vec::with_capacity(out.len() / group);
        for seg in out.chunks_mut(group) {
            let n = group as f64;
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in seg.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_sigma.push(inv);
        }
        let out = checked("layer_norm", like(t, out))?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: a,
                group,
                inv_sigma,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || start + len > t.rows() || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if t.shape().len() > 2 || start + len > c || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c || t.shape().len() > 2 {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r || t.shape().len() > 2 {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Repeats the whole block of rows `reps` times: row `k` of the result
    /// is row `k % rows(a)` of `a`.
    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Result<Var> {
        if reps == 0 {
            return Err(Error::Empty("tile_rows"));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(t.rows() * reps, t.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::TileRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let out = checked("sum", Tensor::scalar(s))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    /// Weighted softmax cross-entropy: `Σ_r w_r · (logsumexp(z_r) − z_r[t_r])`.
    ///
    /// Rows with zero weight are skipped entirely, which is how padded
    /// frames are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        if targets.len() != r || weights.len() != r || !t.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes: c,
            });
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += weights[i] * (max + z.ln() - row[targets[i]]);
        }
        let out = checked("cross_entropy", Tensor::scalar(loss))?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d output / d node` to every node that requires gradients.
    ///
    /// `output` must be a scalar. The walk visits each node once in reverse
    /// insertion order and sums fan-in contributions in a fixed order, so
    /// repeated calls on identical graphs yield bit-identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = self.value(output);
        if seed.len() != 1 {
            return Err(Error::NotScalar(seed.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(like(seed, vec![1.0]));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, contribution: Tensor) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], contribution);
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let da = mm_nt(dy.data(), m, n, tb.data(), k);
                    self.send(grads, *a, like(ta, da));
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(ta.data(), m, k, dy.data(), n);
                    self.send(grads, *b, like(tb, db));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.requires_grad(*a) {
                    let da = mm_nn(dy.data(), m, n, tb.data(), k);
                    self.send(grads, *a, like(ta, da));
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(dy.data(), m, n, ta.data(), k);
                    self.send(grads, *b, like(tb, db));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, dy.clone());
                self.send(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, dy.clone());
                self.send(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = dy.data().iter().zip(tb.data()).map(|(g, x)| g * x).collect();
                    self.send(grads, *a, like(ta, da));
                }
                if self.requires_grad(*b) {
                    let db = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.send(grads, *b, like(tb, db));
                }
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, dy.clone());
                if self.requires_grad(*row) {
                    let tr = self.value(*row);
                    let c = tr.len();
                    let mut dr = vec![0.0; c];
                    for (i, g) in dy.data().iter().enumerate() {
                        dr[i % c] += g;
                    }
                    self.send(grads, *row, like(tr, dr));
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let c = tr.len();
                if self.requires_grad(*a) {
                    let da = dy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * tr.data()[i % c])
                        .collect();
                    self.send(grads, *a, like(ta, da));
                }
                if self.requires_grad(*row) {
                    let mut dr = vec![0.0; c];
                    for (i, (g, x)) in dy.data().iter().zip(ta.data()).enumerate() {
                        dr[i % c] += g * x;
                    }
                    self.send(grads, *row, like(tr, dr));
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, dy.map(|g| g * s)),
            Op::Tanh(a) => {
                let da = dy.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.send(grads, *a, like(y, da));
            }
            Op::Sigmoid(a) => {
                let da = dy.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.send(grads, *a, like(y, da));
            }
            Op::LayerNorm {
                input,
                group,
                inv_sigma,
            } => {
                let mut dx = vec![0.0; y.len()];
                let n = *group as f64;
                for (s, inv) in inv_sigma.iter().enumerate() {
                    let range = s * group..(s + 1) * group;
                    let (gs, ys) = (&dy.data()[range.clone()], &y.data()[range.clone()]);
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gy = gs.iter().zip(ys).map(|(g, v)| g * v).sum::<f64>() / n;
                    for ((d, g), v) in dx[range].iter_mut().zip(gs).zip(ys) {
                        *d = inv * (g - mean_g - v * mean_gy);
                    }
                }
                self.send(grads, *input, like(y, dx));
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                da[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                self.send(grads, *a, like(ta, da));
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (r, c, w) = (ta.rows(), ta.cols(), dy.cols());
                let mut da = vec![0.0; ta.len()];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(dy.row(i));
                }
                self.send(grads, *a, like(ta, da));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    if self.requires_grad(*p) {
                        self.send(grads, *p, like(tp, dy.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    if self.requires_grad(*p) {
                        let mut dp = Vec::with_capacity(tp.len());
                        for i in 0..tp.rows() {
                            dp.extend_from_slice(&dy.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.send(grads, *p, like(tp, dp));
                    }
                    offset += w;
                }
            }
            Op::TileRows(a) => {
                let ta = self.value(*a);
                let n = ta.len();
                let mut da = vec![0.0; n];
                for block in dy.data().chunks(n) {
                    for (d, g) in da.iter_mut().zip(block) {
                        *d += g;
                    }
                }
                self.send(grads, *a, like(ta, da));
            }
            Op::Sum(a) => {
                let g = dy.data()[0];
                let ta = self.value(*a);
                self.send(grads, *a, Tensor::full(ta.shape(), g));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let g = dy.data()[0];
                let mut dl = vec![0.0; tl.len()];
                for (i, (&w, &k)) in weights.iter().zip(targets).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == k { 1.0 } else { 0.0 };
                        dl[i * c + j] = g * w * (probs[i * c + j] - onehot);
                    }
                }
                self.send(grads, *logits, like(tl, dl));
            }
        }
    }
}
