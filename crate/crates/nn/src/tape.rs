//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and routes gradients to parameter leaves. A tape built
//! with [`Tape::inference`] records values only, so it can also be truncated
//! between decoding steps to bound memory.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::gemm::{gemm, Layout};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(u64, ParamId),
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, s: f64 },
    Tanh { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    MaskFill { a: Var, mask: Vec<bool> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Mean { a: Var, axis: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape { a: Var },
    Pick { a: Var, idx: Vec<usize> },
    Sum { a: Var },
    WeightedSum { a: Var, w: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations for later differentiation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    bound: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(u64, ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of the parameters bound from `store` into it
    /// (accumulating).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(key, id, var) in &self.params {
            if key != store.key() {
                continue;
            }
            if let Some(g) = self.get(var) {
                store.get_mut(id).grad_mut().add_assign(g);
            }
        }
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> NnError {
    NnError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            bound: HashMap::new(),
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len` ones. Vars pointing past
    /// `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.bound.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant, &[])
    }

    /// Binds a parameter of `store` as a leaf. Binding the same parameter of
    /// the same store twice returns the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.key(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value().clone(),
            op: Op::Param(key.0, id),
            needs_grad: self.recording,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(key, v);
        v
    }

    /// `a [.., k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.ndim() != 2 || ta.ndim() == 0 || ta.last_dim() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Layout::Normal, tb.data(), Layout::Normal, 0.0, &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched `a [B, m, k] · b [B, k, n]`, or `a · bᵀ` with `b [B, n, k]`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch("batch_matmul", ta, tb));
        }
        let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(mismatch("batch_matmul", ta, tb));
        }
        let layout = if trans_b { Layout::Transposed } else { Layout::Normal };
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &tb.data()[i * k * n..(i + 1) * k * n],
                layout,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        self.push("batch_matmul", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    /// `a [.., c] + bias [c]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.ndim() != 1 || ta.last_dim() != tb.numel() {
            return Err(mismatch("add_bias", ta, tb));
        }
        let c = tb.numel();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { a, bias }, &[a, bias])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.map(a, |x| x * s);
        self.push("scale", value, Op::Scale { a, s }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        self.push("tanh", value, Op::Tanh { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(0.0));
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax { a }, &[a])
    }

    /// Replaces entries where `mask` is true with `fill`; those entries pass
    /// no gradient.
    pub fn mask_fill(&mut self, a: Var, mask: Vec<bool>, fill: f64) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(invalid("mask_fill", format!("mask has {} entries for {} values", mask.len(), ta.numel())));
        }
        let data = ta
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mask_fill", value, Op::MaskFill { a, mask }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.ndim() || start + len > ta.shape()[axis] {
            return Err(invalid("slice", format!("[{start}, {}) along axis {axis} of {:?}", start + len, ta.shape())));
        }
        let (outer, alen, inner) = split_axis(ta.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.ndim() || ta.shape()[axis] == 0 {
            return Err(invalid("mean", format!("axis {axis} of {:?}", ta.shape())));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &ta.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        self.push("mean", value, Op::Mean { a, axis }, &[a])
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`; output is 2-D.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.last_dim());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= rows {
                return Err(invalid("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        self.push("gather_rows", value, Op::GatherRows { a, idx }, &[a])
    }

    /// Normalizes every feature (last axis) over all rows with biased
    /// variance, then applies `gamma`, `beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let rows = tx.rows();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(mismatch("batch_norm", tx, self.value(gamma)));
        }
        if rows == 0 {
            return Err(invalid("batch_norm", "empty batch"));
        }
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(tx.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / rows as f64 + eps).sqrt()).collect();
        let mut xhat = tx.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push("batch_norm", value, op, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Picks one entry per row of `a [rows, c]`; output `[rows]`.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.last_dim();
        if idx.len() != ta.rows() || idx.iter().any(|&i| i >= c) {
            return Err(invalid("pick", format!("{} indices for shape {:?}", idx.len(), ta.shape())));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| ta.data()[r * c + i]).collect();
        self.push("pick", Tensor::vector(data), Op::Pick { a, idx }, &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// `Σ w_i a_i` with constant weights, as a scalar.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if w.len() != ta.numel() {
            return Err(invalid("weighted_sum", format!("{} weights for {} values", w.len(), ta.numel())));
        }
        let s = ta.data().iter().zip(&w).map(|(x, y)| x * y).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { a, w }, &[a])
    }

    /// Differentiates the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NnError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            if let Op::Param(key, id) = node.op {
                params.push((key, id, Var(i)));
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param(..) => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        gemm(m, n, k, gd, Layout::Normal, tb.data(), Layout::Transposed, 1.0, da)
                    });
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| {
                        gemm(k, m, n, ta.data(), Layout::Transposed, gd, Layout::Normal, 1.0, db)
                    });
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = g.shape()[2];
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if self.needs(*a) {
                    // da = dc · bᵀ (or dc · b when b is stored transposed)
                    let layout = if *trans_b { Layout::Normal } else { Layout::Transposed };
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        for i in 0..bsz {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[i * sc..(i + 1) * sc],
                                Layout::Normal,
                                &tb.data()[i * sb..(i + 1) * sb],
                                layout,
                                1.0,
                                &mut da[i * sa..(i + 1) * sa],
                            );
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| {
                        for i in 0..bsz {
                            let a_i = &ta.data()[i * sa..(i + 1) * sa];
                            let g_i = &gd[i * sc..(i + 1) * sc];
                            let db_i = &mut db[i * sb..(i + 1) * sb];
                            if *trans_b {
                                // db [n, k] = dcᵀ · a
                                gemm(n, m, k, g_i, Layout::Transposed, a_i, Layout::Normal, 1.0, db_i);
                            } else {
                                // db [k, n] = aᵀ · dc
                                gemm(k, m, n, a_i, Layout::Transposed, g_i, Layout::Normal, 1.0, db_i);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], g.shape(), |d| {
                            d.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(*v) {
                        let o = self.value(*other).data();
                        accumulate(&mut grads[v.0], g.shape(), |d| {
                            for ((x, y), z) in d.iter_mut().zip(gd).zip(o) {
                                *x += y * z;
                            }
                        });
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |d| {
                        d.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                    });
                }
                if self.needs(*bias) {
                    let c = g.last_dim();
                    accumulate(&mut grads[bias.0], &[c], |d| {
                        for row in gd.chunks(c) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Scale { a, s } => {
                accumulate(&mut grads[a.0], g.shape(), |d| {
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x += y * s)
                });
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                accumulate(&mut grads[a.0], g.shape(), |d| {
                    for ((x, dy), y) in d.iter_mut().zip(gd).zip(y) {
                        *x += dy * (1.0 - y * y);
                    }
                });
            }
            Op::Relu { a } => {
                let xin = self.value(*a).data();
                accumulate(&mut grads[a.0], g.shape(), |d| {
                    for ((x, dy), v) in d.iter_mut().zip(gd).zip(xin) {
                        if *v > 0.0 {
                            *x += dy;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = g.last_dim();
                accumulate(&mut grads[a.0], g.shape(), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((x, dy), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += yy * (dy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let c = g.last_dim();
                accumulate(&mut grads[a.0], g.shape(), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((x, dy), ly) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += dy - ly.exp() * total;
                        }
                    }
                });
            }
            Op::MaskFill { a, mask } => {
                accumulate(&mut grads[a.0], g.shape(), |d| {
                    for ((x, dy), m) in d.iter_mut().zip(gd).zip(mask) {
                        if !m {
                            *x += dy;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let len = tp.shape()[*axis];
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], tp.shape(), |d| {
                            for o in 0..outer {
                                let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let ta = self.value(*a);
                let (outer, alen, inner) = split_axis(ta.shape(), *axis);
                let len = g.shape()[*axis];
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mean { a, axis } => {
                let ta = self.value(*a);
                let (outer, len, inner) = split_axis(ta.shape(), *axis);
                let inv = 1.0 / len as f64;
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let ta = self.value(*a);
                let c = ta.last_dim();
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut d[i * c..(i + 1) * c];
                        dst.iter_mut().zip(&gd[r * c..(r + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.last_dim();
                let rows = g.rows() as f64;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] += grow[j];
                        sum_dy_xhat[j] += grow[j] * xrow[j];
                    }
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.shape(), |d| {
                        for ((drow, grow), xrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                drow[j] += gv[j] * inv_std[j] / rows
                                    * (rows * grow[j] - sum_dy[j] - xrow[j] * sum_dy_xhat[j]);
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], &[c], |d| {
                        d.iter_mut().zip(&sum_dy_xhat).for_each(|(x, y)| *x += y)
                    });
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], &[c], |d| {
                        d.iter_mut().zip(&sum_dy).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::Reshape { a } => {
                let shape = self.value(*a).shape();
                accumulate(&mut grads[a.0], shape, |d| {
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                });
            }
            Op::Pick { a, idx } => {
                let ta = self.value(*a);
                let c = ta.last_dim();
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] += gd[r];
                    }
                });
            }
            Op::Sum { a } => {
                let ta = self.value(*a);
                accumulate(&mut grads[a.0], ta.shape(), |d| d.iter_mut().for_each(|x| *x += gd[0]));
            }
            Op::WeightedSum { a, w } => {
                let ta = self.value(*a);
                accumulate(&mut grads[a.0], ta.shape(), |d| {
                    d.iter_mut().zip(w).for_each(|(x, wi)| *x += wi * gd[0])
                });
            }
        }
    }
}
