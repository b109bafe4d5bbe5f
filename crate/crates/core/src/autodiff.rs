//! Graph-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an arena of nodes built eagerly as operations are applied:
//! every op computes its value immediately and records its parents. Node ids
//! grow monotonically, so reverse id order is a valid topological order for
//! [`Graph::backward`]. Leaves created with `requires_grad = false` (frozen
//! model weights, data) never receive gradients.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Softmax { x: Var, axis: usize },
    CausalSoftmax { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f32>, inv_std: Vec<f32> },
    Gelu(Var),
    Silu(Var),
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    StraightThrough { x: Var, pass: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Stable softmax of one contiguous row, written into `out`.
fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_matrix("matmul", ta)?;
        let (k2, n) = check_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_matrix("matmul_nt", ta)?;
        let (n, k2) = check_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by the vector `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(r));
        let (_, cols) = ta.dims2();
        if tr.numel() != cols {
            return Err(Error::shape("mul_row", ta.shape(), tr.shape()));
        }
        let rv = tr.data();
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(rv).map(|(x, s)| x * s))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::MulRow(a, r), &[a, r]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Softmax along `axis` of an arbitrary-rank tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let mut buf_in = vec![0.0; len];
        let mut buf_out = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    buf_in[j] = src[base + j * inner];
                }
                softmax_row(&buf_in, &mut buf_out);
                for j in 0..len {
                    out[base + j * inner] = buf_out[j];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Row softmax of an `n × (offset + n)` score matrix where row `i` may
    /// only attend to columns `0..=offset + i`; masked entries are exactly 0.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = check_matrix("causal_softmax", t)?;
        if cols < rows {
            return Err(Error::shape("causal_softmax", t.shape(), &[rows, rows]));
        }
        let offset = cols - rows;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let visible = offset + r + 1;
            softmax_row(
                &t.data()[r * cols..r * cols + visible],
                &mut out[r * cols..r * cols + visible],
            );
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::CausalSoftmax { x }, &[x]))
    }

    /// Row-wise RMS normalization: `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("rmsnorm eps must be positive"));
        }
        let (t, g) = (self.value(x), self.value(gain));
        let (rows, cols) = t.dims2();
        if g.numel() != cols {
            return Err(Error::shape("rmsnorm", t.shape(), g.shape()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        let mut inv_rms = Vec::with_capacity(rows);
        for row in t.data().chunks(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g.data()).map(|(v, gv)| v * inv * gv));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layernorm eps must be positive"));
        }
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = t.dims2();
        if g.numel() != cols || b.numel() != cols {
            return Err(Error::shape("layernorm", t.shape(), g.shape()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        let mut normed = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for row in t.data().chunks(cols) {
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let n = (row[j] - mean) * inv;
                normed.push(n);
                out.push(n * g.data()[j] + b.data()[j]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gain, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    /// Gathers rows of `table` (shape `vocab × dim`).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = check_matrix("embed", t)?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of zero ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id: id as u32, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), dim], out);
        let op = Op::Embed {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = check_matrix("cross_entropy", t)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut total = 0.0f64;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= cols {
                return Err(Error::TokenOutOfRange { id: tgt as u32, vocab: cols });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            total += lse - row[tgt] as f64;
        }
        let value = Tensor::scalar((total / rows as f64) as f32);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(value, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        self.push(Tensor::scalar(s as f32), Op::SumSquares(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = check_matrix("slice_cols", t)?;
        if len == 0 || start + len > cols {
            return Err(Error::contract(format!(
                "column slice {start}+{len} invalid for {cols} columns"
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in t.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::from_parts(vec![rows, len], out);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = check_matrix("concat_cols", self.value(first))?.0;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = check_matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            total_cols += c;
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.shape()[1];
            for r in 0..rows {
                out[r * total_cols + off..r * total_cols + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let value = Tensor::from_parts(vec![rows, total_cols], out);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Node whose forward value is `value` (same shape as `x`) and whose
    /// backward passes the incoming gradient to `x` where `pass` is set and
    /// drops it elsewhere. This is the straight-through estimator used for
    /// rounding inside fake quantization.
    pub fn straight_through(&mut self, x: Var, value: Tensor, pass: Vec<bool>) -> Result<Var> {
        same_shape("straight_through", self.value(x), &value)?;
        if pass.len() != value.numel() {
            return Err(Error::shape("straight_through", value.shape(), &[pass.len()]));
        }
        Ok(self.push(value, Op::StraightThrough { x, pass }, &[x]))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G Bᵀ, dB = Aᵀ G
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, tb.data(), true, ga, 1.0));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, ta.data(), true, g, false, gb, 1.0));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, tb.data(), false, ga, 1.0));
                self.accumulate(grads, *b, |gb| gemm(n, m, k, g, true, ta.data(), false, gb, 1.0));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(tb.data()) {
                        *s += g * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(ta.data()) {
                        *s += g * x;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let cols = tr.numel();
                self.accumulate(grads, *a, |s| {
                    for (i, (s, g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * tr.data()[i % cols];
                    }
                });
                self.accumulate(grads, *r, |s| {
                    for (i, (g, x)) in g.iter().zip(ta.data()).enumerate() {
                        s[i % cols] += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
            }
            Op::Softmax { x, axis } => {
                let shape = out.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = out.data();
                self.accumulate(grads, *x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f32 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                s[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax { x } => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let offset = cols - rows;
                let y = out.data();
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        let lo = r * cols;
                        let hi = lo + offset + r + 1;
                        let dot: f32 = (lo..hi).map(|i| g[i] * y[i]).sum();
                        for i in lo..hi {
                            s[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let cols = tg.numel();
                self.accumulate(grads, *x, |s| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &tx.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        // y = x * inv * gain; dx = inv*(gain*g) - x * inv^3/cols * sum(gain*g*x)
                        let dot: f32 = (0..cols).map(|j| gr[j] * tg.data()[j] * xr[j]).sum();
                        let coef = inv * inv * inv * dot / cols as f32;
                        for j in 0..cols {
                            s[r * cols + j] += inv * tg.data()[j] * gr[j] - xr[j] * coef;
                        }
                    }
                });
                self.accumulate(grads, *gain, |s| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..cols {
                            s[j] += g[r * cols + j] * tx.data()[r * cols + j] * inv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let cols = tg.numel();
                self.accumulate(grads, *x, |s| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let nr = &normed[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dn: Vec<f32> = (0..cols).map(|j| gr[j] * tg.data()[j]).collect();
                        let mean_dn = dn.iter().sum::<f32>() / cols as f32;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                        for j in 0..cols {
                            s[r * cols + j] += inv * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                });
                self.accumulate(grads, *gain, |s| {
                    for (i, (gv, n)) in g.iter().zip(normed).enumerate() {
                        s[i % cols] += gv * n;
                    }
                });
                self.accumulate(grads, *bias, |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % cols] += gv;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |s| {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(tx.data()) {
                        *s += g * gelu_grad(v);
                    }
                });
            }
            Op::Silu(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |s| {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(tx.data()) {
                        let sg = sigmoid(v);
                        *s += g * (sg + v * sg * (1.0 - sg));
                    }
                });
            }
            Op::Embed { table, ids } => {
                let dim = out.shape()[1];
                self.accumulate(grads, *table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            s[id * dim + j] += g[r * dim + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = self.value(*logits);
                let (rows, cols) = tl.dims2();
                let scale = g[0] / rows as f32;
                self.accumulate(grads, *logits, |s| {
                    let mut p = vec![0.0; cols];
                    for (r, &tgt) in targets.iter().enumerate() {
                        softmax_row(tl.row(r), &mut p);
                        p[tgt] -= 1.0;
                        for j in 0..cols {
                            s[r * cols + j] += scale * p[j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::SumSquares(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |s| {
                    for (s, v) in s.iter_mut().zip(tx.data()) {
                        *s += 2.0 * v * g[0];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).shape()[1];
                let len = out.shape()[1];
                self.accumulate(grads, *x, |s| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for (j, gv) in gr.iter().enumerate() {
                            s[r * cols + start + j] += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    self.accumulate(grads, p, |s| {
                        for (r, sr) in s.chunks_mut(c).enumerate() {
                            for (j, sv) in sr.iter_mut().enumerate() {
                                *sv += g[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out.dims2().1;
                let off = start * cols;
                self.accumulate(grads, *x, |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[off + i] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, |s| {
                        for (sv, gv) in s.iter_mut().zip(&g[off..off + n]) {
                            *sv += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::StraightThrough { x, pass } => {
                self.accumulate(grads, *x, |s| {
                    for ((s, g), &p) in s.iter_mut().zip(g).zip(pass) {
                        if p {
                            *s += g;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    /// Checks the analytic gradient of `f` (a scalar function of one input
    /// tensor built on a fresh graph) against central differences in f64.
    fn check_grad(input: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let root = f(&mut g, x);
        let grads = g.backward(root).unwrap();
        let analytic = grads.get(x).expect("gradient present").to_vec();

        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t);
            let r = f(&mut g, x);
            g.value(r).item() as f64
        };
        let h = 1e-3f32;
        let mut num = Vec::new();
        for i in 0..input.numel() {
            let mut plus = input.to_vec();
            let mut minus = input.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = eval(Tensor::new(input.shape(), plus).unwrap());
            let fm = eval(Tensor::new(input.shape(), minus).unwrap());
            num.push((fp - fm) / (2.0 * h as f64));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&num)
            .map(|(a, n)| (*a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-6);
        assert!(diff / norm < 1e-3, "relative gradient error {}", diff / norm);
    }

    /// Weighted sum so every output element contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.value(y).shape());
        let w = g.constant(w);
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn softmax_axis0_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[3, 4]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        for j in 0..4 {
            let s: f32 = (0..3).map(|i| d[i * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn grad_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for axis in 0..2 {
            check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
                let y = g.softmax(x, axis).unwrap();
                weighted_sum(g, y, 11)
            });
        }
    }

    #[test]
    fn grad_causal_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_grad(rand_tensor(&mut rng, &[3, 5]), |g, x| {
            let y = g.causal_softmax(x).unwrap();
            weighted_sum(g, y, 12)
        });
    }

    #[test]
    fn causal_softmax_masks() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.causal_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn grad_matmul_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = rand_tensor(&mut rng, &[4, 2]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul(x, bv).unwrap();
            weighted_sum(g, y, 13)
        });
        let a = rand_tensor(&mut rng, &[2, 3]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let av = g.constant(a.clone());
            let y = g.matmul(av, x).unwrap();
            weighted_sum(g, y, 14)
        });
    }

    #[test]
    fn grad_matmul_nt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_tensor(&mut rng, &[5, 4]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul_nt(x, bv).unwrap();
            weighted_sum(g, y, 15)
        });
        let a = rand_tensor(&mut rng, &[2, 4]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let av = g.constant(a.clone());
            let y = g.matmul_nt(av, x).unwrap();
            weighted_sum(g, y, 16)
        });
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gain = rand_tensor(&mut rng, &[4]);
        let bias = rand_tensor(&mut rng, &[4]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let gv = g.constant(gain.clone());
            let y = g.rmsnorm(x, gv, 1e-5).unwrap();
            weighted_sum(g, y, 17)
        });
        let x0 = rand_tensor(&mut rng, &[3, 4]);
        check_grad(gain.clone(), |g, gv| {
            let x = g.constant(x0.clone());
            let y = g.rmsnorm(x, gv, 1e-5).unwrap();
            weighted_sum(g, y, 18)
        });
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let gv = g.constant(gain.clone());
            let bv = g.constant(bias.clone());
            let y = g.layernorm(x, gv, bv, 1e-5).unwrap();
            weighted_sum(g, y, 19)
        });
        check_grad(bias.clone(), |g, bv| {
            let x = g.constant(x0.clone());
            let gv = g.constant(gain.clone());
            let y = g.layernorm(x, gv, bv, 1e-5).unwrap();
            weighted_sum(g, y, 20)
        });
    }

    #[test]
    fn rmsnorm_unit_vector() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8], 1.0));
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let y = g.rmsnorm(x, gain, 1e-5).unwrap();
        let want = 1.0 / (1.0f32 + 1e-5).sqrt();
        for v in g.value(y).data() {
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn grad_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let y = g.gelu(x);
            weighted_sum(g, y, 21)
        });
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let y = g.silu(x);
            weighted_sum(g, y, 22)
        });
        let other = rand_tensor(&mut rng, &[3, 4]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let o = g.constant(other.clone());
            let y = g.mul(x, o).unwrap();
            let z = g.add(y, x).unwrap();
            let z = g.sub(z, o).unwrap();
            let z = g.scale(z, 0.7);
            weighted_sum(g, z, 23)
        });
        let row = rand_tensor(&mut rng, &[4]);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let r = g.constant(row.clone());
            let y = g.mul_row(x, r).unwrap();
            weighted_sum(g, y, 24)
        });
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| g.sum_squares(x));
    }

    #[test]
    fn grad_embed_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, t| {
            let y = g.embed(t, &[2, 0, 2]).unwrap();
            weighted_sum(g, y, 25)
        });
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| g.cross_entropy(x, &[1, 3, 0]).unwrap());
    }

    #[test]
    fn grad_slicing_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        check_grad(rand_tensor(&mut rng, &[3, 4]), |g, x| {
            let a = g.slice_cols(x, 1, 2).unwrap();
            let b = g.slice_cols(x, 0, 1).unwrap();
            let c = g.concat_cols(&[a, b, a]).unwrap();
            let r = g.slice_rows(c, 1, 3).unwrap();
            let top = g.slice_rows(c, 0, 1).unwrap();
            let s = g.concat_rows(&[r, top]).unwrap();
            weighted_sum(g, s, 26)
        });
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![20.0, -20.0]).unwrap());
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-8);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2, 3], 0.5));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2], 1.0));
        let q = g.param(Tensor::full(&[2], 1.0));
        let s = g.sum(q);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).is_none());
        assert!(grads.get(q).is_some());
    }

    #[test]
    fn frozen_leaves_get_nothing() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(&[2, 2], 1.0));
        let p = g.param(Tensor::full(&[2, 2], 1.0));
        let y = g.matmul(w, p).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(y).is_some());
        assert_eq!(grads.len(), 3); // p, y, s
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn straight_through_masks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![0.1, 0.2, 5.0]).unwrap());
        let q = g
            .straight_through(x, Tensor::new(&[3], vec![0.0, 0.25, 1.0]).unwrap(), vec![true, true, false])
            .unwrap();
        let s = g.sum(q);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0]);
    }
}
