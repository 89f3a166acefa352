//! Tape-style reverse-mode autodiff over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep. Parameters can be
//! bound by reference, which keeps per-sequence graphs cheap to build.

use std::borrow::Cow;

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Softmax(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<F>,
    },
    Silu(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<F>,
    },
    Mse(NodeId, NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Rope {
        x: NodeId,
        head_dim: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    trainable: bool,
}

/// A computation recorded for one backward pass.
pub struct Graph<'p, F: Scalar = f32> {
    nodes: Vec<Node<'p, F>>,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor<F>>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// An owned leaf; `trainable` leaves always get a gradient from backward.
    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> NodeId {
        self.push_leaf(Cow::Owned(value), trainable)
    }

    /// A trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, value: &'p Tensor<F>) -> NodeId {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// A borrowed leaf that receives no gradient (inference).
    pub fn frozen(&mut self, value: &'p Tensor<F>) -> NodeId {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            trainable: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul", ta)?;
        let (k2, n) = dims("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = dims("transpose", t)?;
        let out = kernels::transpose(t.data(), r, c);
        self.push("transpose", Tensor::matrix(c, r, out)?, Op::Transpose(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() || ta.dims2().is_none() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> Result<NodeId> {
        let t = self.value(x);
        let out: Vec<F> = t.data().iter().map(|&v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(x, s), &[x])
    }

    /// Row softmax; `causal` masks columns beyond the row index to exactly zero.
    pub fn softmax_rows(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = dims("softmax_rows", t)?;
        let out = kernels::softmax_rows(t.data(), r, c, causal);
        self.push("softmax_rows", Tensor::matrix(r, c, out)?, Op::Softmax(x), &[x])
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: F) -> Result<NodeId> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (r, c) = dims("rms_norm", tx)?;
        if tg.numel() != c {
            return Err(mismatch("rms_norm", tx, tg));
        }
        let (out, inv_rms) = kernels::rms_norm(tx.data(), r, c, tg.data(), eps);
        self.push(
            "rms_norm",
            Tensor::matrix(r, c, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            &[x, gain],
        )
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let out: Vec<F> = t.data().iter().map(|&v| kernels::silu(v)).collect();
        let shape = t.shape().to_vec();
        self.push("silu", Tensor::new(shape, out)?, Op::Silu(x), &[x])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = dims("slice_cols", t)?;
        if start + len > c || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&t.data()[row * c + start..row * c + start + len]);
        }
        self.push("slice_cols", Tensor::matrix(r, len, out)?, Op::SliceCols { x, start }, &[x])
    }

    /// Gathers rows by index (repeats allowed); backward scatter-adds.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = dims("select_rows", t)?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::ShapeMismatch {
                    op: "select_rows",
                    left: t.shape().to_vec(),
                    right: vec![i],
                });
            }
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "select_rows",
            Tensor::matrix(rows.len(), c, out)?,
            Op::SelectRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let r = dims("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims("concat_cols", self.value(p))?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(row));
            }
        }
        self.push("concat_cols", Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = dims("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = dims("concat_rows", self.value(p))?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), self.value(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum();
        let m = s / F::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Divides each row by its L2 norm. A zero row is a hard error.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = dims("l2_normalize_rows", t)?;
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            let n = kernels::l2_norm(t.row(row));
            if n <= F::zero() {
                return Err(Error::NonFinite { op: "l2_normalize_rows" });
            }
            norms.push(n);
            out.extend(t.row(row).iter().map(|&v| v / n));
        }
        self.push(
            "l2_normalize_rows",
            Tensor::matrix(r, c, out)?,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut acc = F::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            acc += d * d;
        }
        let m = acc / F::of(ta.numel() as f64);
        self.push("mse", Tensor::scalar(m), Op::Mse(a, b), &[a, b])
    }

    /// Mean over rows of `−log softmax(logits)[row, target]`. When `mask` is
    /// given, only admitted columns take part in a row's softmax; masked
    /// columns receive zero gradient.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: Option<&[bool]>) -> Result<NodeId> {
        let t = self.value(logits);
        let (r, c) = dims("cross_entropy", t)?;
        if targets.len() != r || mask.is_some_and(|m| m.len() != r * c) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len(), mask.map_or(0, <[bool]>::len)],
            });
        }
        let admitted = |row: usize, col: usize| mask.is_none_or(|m| m[row * c + col]);
        let mut probs = vec![F::zero(); r * c];
        let mut total = F::zero();
        for (row, &target) in targets.iter().enumerate() {
            if target >= c || !admitted(row, target) {
                return Err(Error::invalid(format!(
                    "cross_entropy: target {target} of row {row} is not an admitted column"
                )));
            }
            let xr = t.row(row);
            let mut max = F::neg_infinity();
            for (col, &v) in xr.iter().enumerate() {
                if admitted(row, col) {
                    max = max.max(v);
                }
            }
            let mut sum = F::zero();
            for (col, &v) in xr.iter().enumerate() {
                if admitted(row, col) {
                    let e = (v - max).exp();
                    probs[row * c + col] = e;
                    sum += e;
                }
            }
            for p in &mut probs[row * c..(row + 1) * c] {
                *p = *p / sum;
            }
            total += sum.ln() - (xr[target] - max);
        }
        let loss = total / F::of(r as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Rotary position embedding over every `head_dim` block of the columns;
    /// row `r` sits at position `start + r`.
    pub fn rope(&mut self, x: NodeId, head_dim: usize, base: f64, start: usize) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = dims("rope", t)?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || c % head_dim != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                left: t.shape().to_vec(),
                right: vec![head_dim],
            });
        }
        let (cos, sin) = kernels::rope_tables(r, start, head_dim, base);
        let out = kernels::rope_apply(t.data(), r, c, head_dim, &cos, &sin, false);
        self.push(
            "rope",
            Tensor::matrix(r, c, out)?,
            Op::Rope { x, head_dim, cos, sin },
            &[x],
        )
    }

    /// Backward from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::filled(t.shape().to_vec(), F::one()))
    }

    /// Backward from an arbitrary node given its upstream gradient.
    pub fn backward_with_seed(&self, output: NodeId, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.numel() != self.value(output).numel() {
            return Err(mismatch("backward", self.value(output), &seed));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut leaf_grads = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    let data = grads[idx].take().unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                    Some(Tensor::new(shape, data)?)
                }
                _ => None,
            };
            leaf_grads.push(g);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(&self, node: &Node<'p, F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if wants(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    accumulate(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                accumulate(grads, *x, kernels::transpose(g, c, r));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(tb).map(|(&d, &y)| d * y).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(ta).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|&d| d * *s).collect()),
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![F::zero(); y.numel()];
                for row in 0..y.rows() {
                    let yr = y.row(row);
                    let gr = &g[row * c..(row + 1) * c];
                    let inner = kernels::dot(yr, gr);
                    for col in 0..c {
                        dx[row * c + col] = yr[col] * (gr[col] - inner);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (r, c) = (tx.rows(), tx.cols());
                let n = F::of(c as f64);
                if wants(*x) {
                    let mut dx = vec![F::zero(); r * c];
                    for row in 0..r {
                        let xr = tx.row(row);
                        let gr = &g[row * c..(row + 1) * c];
                        let ir = inv_rms[row];
                        let mut s = F::zero();
                        for j in 0..c {
                            s += gr[j] * tg.data()[j] * xr[j];
                        }
                        let coef = ir * ir * ir * s / n;
                        for j in 0..c {
                            dx[row * c + j] = ir * tg.data()[j] * gr[j] - xr[j] * coef;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![F::zero(); c];
                    for row in 0..r {
                        let xr = tx.row(row);
                        for j in 0..c {
                            dg[j] += g[row * c + j] * xr[j] * inv_rms[row];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
            }
            Op::Silu(x) => {
                let tx = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(tx)
                    .map(|(&d, &v)| {
                        let s = kernels::sigmoid(v);
                        d * s * (F::one() + v * (F::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let len = node.value.cols();
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len].copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![F::zero(); tx.numel()];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[k * c + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for row in 0..r {
                            dp.extend_from_slice(&g[row * total + offset..row * total + offset + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / F::of(n as f64); n]);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![F::zero(); y.numel()];
                for row in 0..y.rows() {
                    let yr = y.row(row);
                    let gr = &g[row * c..(row + 1) * c];
                    let inner = kernels::dot(yr, gr);
                    for j in 0..c {
                        dx[row * c + j] = (gr[j] - yr[j] * inner) / norms[row];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] * F::of(2.0) / F::of(ta.len() as f64);
                let da: Vec<F> = ta.iter().zip(tb).map(|(&x, &y)| k * (x - y)).collect();
                if wants(*b) {
                    accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                if wants(*a) {
                    accumulate(grads, *a, da);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let r = targets.len();
                let k = g[0] / F::of(r as f64);
                let mut dx: Vec<F> = probs.iter().map(|&p| p * k).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * c + t] -= k;
                }
                accumulate(grads, *logits, dx);
            }
            Op::Rope { x, head_dim, cos, sin } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                accumulate(grads, *x, kernels::rope_apply(g, r, c, *head_dim, cos, sin, true));
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], id: NodeId, g: Vec<F>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<F: Scalar = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf that requires grad; `None` for constants and interior nodes.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
