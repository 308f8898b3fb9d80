//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value plus whatever it needs to run backward, and returns a
//! [`Var`] handle. [`Graph::backward`] walks the tape in reverse from a scalar
//! root and returns a fresh [`Gradients`] map; the graph itself is not
//! mutated, so several roots can be differentiated over one tape.

use crate::error::TensorError;
use crate::tensor::{axis_extents, gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    /// `x + constant`; the constant carries no gradient.
    Shift(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    /// `out[i] = x[i, idx[i]]`
    PickRows { x: Var, idx: Vec<usize> },
    /// Elementwise product with a fixed mask (already scaled).
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass. Nodes that do not lie on a path
/// to the root have no entry and read back as zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when `v` is off-path.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(), TensorError> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`, with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (r, c) = require_matrix("matmul", tb)?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, trans_b }, value))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Adds a `[c]` bias to every row of an `[r, c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = require_matrix("add_row", tx)?;
        if tb.len() != c || tb.rank() != 1 {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow { x, bias }, value))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(x, s), value)
    }

    /// Adds a constant tensor (e.g. an attention mask) that is not differentiated.
    pub fn shift(&mut self, x: Var, constant: &Tensor) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape() != constant.shape() {
            return Err(mismatch("shift", t, constant));
        }
        let data = t.data().iter().zip(constant.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Shift(x), value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let (_, c) = require_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, pc) = require_matrix("concat_rows", t)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (r, _) = require_matrix("concat_cols", self.value(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = require_matrix("concat_cols", t)?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = require_matrix("slice_rows", t)?;
        if start > end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                extent: r,
            });
        }
        let value = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        Ok(self.push(Op::SliceRows { x, start }, value))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = require_matrix("slice_cols", t)?;
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::new(vec![r, end - start], data)?;
        Ok(self.push(Op::SliceCols { x, start }, value))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (v, d) = require_matrix("embedding", t)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(x), value)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis("softmax", t, axis)?;
        let mut data = t.data().to_vec();
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..dim).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..dim {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..dim {
                    data[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax { x, axis }, value))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis("log_softmax", t, axis)?;
        let mut data = t.data().to_vec();
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..dim).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..dim).map(|j| (data[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..dim {
                    data[idx(j)] -= lse;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::LogSoftmax { x, axis }, value))
    }

    /// Normalizes along `axis` to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length `shape[axis]`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis("layer_norm", t, axis)?;
        let (outer, dim, inner) = axis_extents(t.shape(), axis);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != dim {
            return Err(mismatch("layer_norm", t, g));
        }
        if b.len() != dim {
            return Err(mismatch("layer_norm", t, b));
        }
        let src = t.data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let idx = |j: usize| base + j * inner;
                let mean = (0..dim).map(|j| src[idx(j)]).sum::<f64>() / dim as f64;
                let var = (0..dim).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / dim as f64;
                let r = 1.0 / (var + eps).sqrt();
                for j in 0..dim {
                    let h = (src[idx(j)] - mean) * r;
                    xhat[idx(j)] = h;
                    out[idx(j)] = h * g.data()[j] + b.data()[j];
                }
                inv_std.push(r);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Selects one entry per row: `out[i] = x[i, idx[i]]`.
    pub fn pick_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = require_matrix("pick_rows", t)?;
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "pick_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_rows",
                    index: j,
                    extent: c,
                });
            }
            data.push(t.data()[i * c + j]);
        }
        Ok(self.push(
            Op::PickRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::vector(data),
        ))
    }

    /// Multiplies by a fixed elementwise mask (inverted-dropout scaling is the
    /// caller's job).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        let shaped = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = g.shape()[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                if *trans_b {
                    // c = a b^T, b: [n, k]
                    gemm(m, n, k, g.data(), false, tb.data(), false, &mut da, false);
                    gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, false);
                } else {
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                }
                acc(*a, shaped(*a, da));
                acc(*b, shaped(*b, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, shaped(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                acc(*a, shaped(*a, da));
                acc(*b, shaped(*b, db));
            }
            Op::AddRow { x, bias } => {
                let c = self.value(*bias).len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, g.clone());
                acc(*bias, shaped(*bias, db));
            }
            Op::Scale(x, s) => acc(*x, shaped(*x, g.data().iter().map(|v| v * s).collect())),
            Op::Shift(x) => acc(*x, g.clone()),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, shaped(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * total + start..i * total + start + c]);
                    }
                    acc(p, shaped(p, d));
                    start += c;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let c = t.shape()[1];
                let mut d = vec![0.0; t.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, shaped(*x, d));
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let w = g.shape()[1];
                let mut d = vec![0.0; t.len()];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*x, shaped(*x, d));
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[row * d + j];
                    }
                }
                acc(*table, shaped(*table, dt));
            }
            Op::Relu(x) => {
                let t = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, shaped(*x, d));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let dot: f64 = (0..dim)
                            .map(|j| g.data()[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..dim {
                            let p = base + j * inner;
                            d[p] = y[p] * (g.data()[p] - dot);
                        }
                    }
                }
                acc(*x, shaped(*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let total: f64 = (0..dim).map(|j| g.data()[base + j * inner]).sum();
                        for j in 0..dim {
                            let p = base + j * inner;
                            d[p] = g.data()[p] - y[p].exp() * total;
                        }
                    }
                }
                acc(*x, shaped(*x, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let gd = self.value(*gain).data();
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; dim];
                let mut dbias = vec![0.0; dim];
                let mut dxhat = vec![0.0; dim];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let r = inv_std[o * inner + i];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..dim {
                            let p = base + j * inner;
                            let gv = g.data()[p];
                            dg[j] += gv * xhat[p];
                            dbias[j] += gv;
                            dxhat[j] = gv * gd[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[p];
                        }
                        mean_d /= dim as f64;
                        mean_dx /= dim as f64;
                        for j in 0..dim {
                            let p = base + j * inner;
                            dx[p] = r * (dxhat[j] - mean_d - xhat[p] * mean_dx);
                        }
                    }
                }
                acc(*x, shaped(*x, dx));
                acc(*gain, shaped(*gain, dg));
                acc(*bias, shaped(*bias, dbias));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, shaped(*x, vec![g.item(); n]));
            }
            Op::PickRows { x, idx } => {
                let t = self.value(*x);
                let c = t.shape()[1];
                let mut d = vec![0.0; t.len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g.data()[i];
                }
                acc(*x, shaped(*x, d));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*x, shaped(*x, d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.leaf(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.softmax(x, 2),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2, .. })
        ));
    }

    #[test]
    fn layer_norm_of_two_vector() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0, 4.0]));
        let gain = g.leaf(Tensor::ones(&[2]));
        let bias = g.leaf(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 0, 1e-5).unwrap();
        // mean 3, variance 1: (x - 3) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = g.value(y).data();
        assert!((out[0] + expect).abs() < 1e-12);
        assert!((out[1] - expect).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(grads.wrt(root).data(), &[1.0]);
    }

    #[test]
    fn disconnected_node_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.leaf(Tensor::vector(vec![4.0]));
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let root = g.sum(z);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).data(), &[12.0]);
    }
}
