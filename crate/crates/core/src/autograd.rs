//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and the backward pass is a single reverse
//! sweep. Gradients are only materialized for nodes that transitively depend
//! on a leaf created with `requires_grad = true`.

use std::borrow::Cow;

use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

/// Norm below which a row is excluded from [`Graph::cosine_rows`].
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Affine { x: Var, scale: f64 },
    Gate { x: Var, k: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Gather { base: Var, learned: Option<Var>, ids: Vec<usize> },
    SumSq(Var),
    Sum(Var),
    CosineRows { a: Var, b: Var, norm_a: Vec<f64>, norm_b: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Leaves may borrow parameter tensors for `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `(1, cols)` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow { x, row }, &[x, row])
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.gate(x, 1.0)
    }

    /// `x · σ(1.702 x)`, the sigmoid approximation of GELU.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        self.gate(x, 1.702)
    }

    fn gate(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(k * v));
        self.push(value, Op::Gate { x, k }, &[x])
    }

    /// Row-wise layer normalization with `(1, cols)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols, "layer_norm gain width");
        assert_eq!(b.len(), cols, "layer_norm bias width");
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        if cols > 0 {
            for row in value.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.cols(), "column slice out of range");
        let mut value = Tensor::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_rows(start, end);
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    /// Row lookup across two stacked tables: ids below `base.rows()` index
    /// `base`, the rest index `learned`.
    pub fn gather(&mut self, base: Var, learned: Option<Var>, ids: &[usize]) -> Var {
        let b = self.value(base);
        let nb = b.rows();
        let cols = b.cols();
        let mut value = Tensor::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            let src = if id < nb {
                b.row(id)
            } else {
                let l = learned.expect("id beyond base table without learned rows");
                let lv = self.value(l);
                assert_eq!(lv.cols(), cols, "learned table width");
                lv.row(id - nb)
            };
            value.row_mut(i).copy_from_slice(src);
        }
        let mut inputs = vec![base];
        inputs.extend(learned);
        self.push(
            value,
            Op::Gather {
                base,
                learned,
                ids: ids.to_vec(),
            },
            &inputs,
        )
    }

    /// Sum of squared entries, as a `(1, 1)` tensor.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).norm_sq());
        self.push(value, Op::SumSq(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Per-row cosine similarity, shape `(rows, 1)`. Rows where either side
    /// has norm below [`COSINE_EPS`] yield 0 and carry no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "cosine_rows shape mismatch");
        let rows = av.rows();
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        let mut value = Tensor::zeros(rows, 1);
        for r in 0..rows {
            let (x, y) = (av.row(r), bv.row(r));
            let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            norm_a.push(na);
            norm_b.push(nb);
            if na >= COSINE_EPS && nb >= COSINE_EPS {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                value.set(r, 0, dot / (na * nb));
            }
        }
        self.push(
            value,
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
            },
            &[a, b],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backprop_node(&self, node: &Node<'a>, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = A·B  => dA = dC·Bᵀ ;  C = A·Bᵀ => dA = dC·B
                    gemm(false, dy, !trans_b, bv, 1.0, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    if *trans_b {
                        gemm(true, dy, false, av, 1.0, self.slot(grads, *b));
                    } else {
                        gemm(true, av, false, dy, 1.0, self.slot(grads, *b));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        self.slot(grads, *v).add_assign(dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.slot(grads, *a).add_assign(dy);
                }
                if self.wants(*b) {
                    let g = self.slot(grads, *b);
                    for (x, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *x -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let g = self.slot(grads, *a);
                    for ((x, d), o) in g.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *x += d * o;
                    }
                }
                if self.wants(*b) {
                    let g = self.slot(grads, *b);
                    for ((x, d), o) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *x += d * o;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    self.slot(grads, *x).add_assign(dy);
                }
                if self.wants(*row) {
                    let g = self.slot(grads, *row);
                    for r in 0..dy.rows() {
                        for (x, d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                let g = self.slot(grads, *x);
                for (v, d) in g.data_mut().iter_mut().zip(dy.data()) {
                    *v += scale * d;
                }
            }
            Op::Gate { x, k } => {
                let xv = self.value(*x);
                let g = self.slot(grads, *x);
                for ((v, d), &u) in g.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                    let s = sigmoid(k * u);
                    *v += d * (s + k * u * s * (1.0 - s));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gamma).data();
                if self.wants(*beta) {
                    let g = self.slot(grads, *beta);
                    for r in 0..rows {
                        for (v, d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *v += d;
                        }
                    }
                }
                if self.wants(*gamma) {
                    let g = self.slot(grads, *gamma);
                    for r in 0..rows {
                        let (d, xh) = (dy.row(r), xhat.row(r));
                        for c in 0..cols {
                            g.data_mut()[c] += d[c] * xh[c];
                        }
                    }
                }
                if self.wants(*x) {
                    let g = self.slot(grads, *x);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (d, xh) = (dy.row(r), xhat.row(r));
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = d[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        let out = g.row_mut(r);
                        for c in 0..cols {
                            let dxh = d[c] * gv[c];
                            out[c] += rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y: &Tensor = &node.value;
                let g = self.slot(grads, *x);
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                        *out += yr[c] * (dr[c] - dot);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let g = self.slot(grads, *x);
                for r in 0..dy.rows() {
                    let dst = &mut g.row_mut(r)[*start..*start + dy.cols()];
                    for (v, d) in dst.iter_mut().zip(dy.row(r)) {
                        *v += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let g = self.slot(grads, *p);
                        for r in 0..dy.rows() {
                            for (v, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[offset..offset + w]) {
                                *v += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let g = self.slot(grads, *x);
                for r in 0..dy.rows() {
                    for (v, d) in g.row_mut(start + r).iter_mut().zip(dy.row(r)) {
                        *v += d;
                    }
                }
            }
            Op::Gather { base, learned, ids } => {
                let nb = self.value(*base).rows();
                for (i, &id) in ids.iter().enumerate() {
                    let (target, row) = if id < nb {
                        (*base, id)
                    } else {
                        (learned.expect("validated at gather time"), id - nb)
                    };
                    if self.wants(target) {
                        let g = self.slot(grads, target);
                        for (v, d) in g.row_mut(row).iter_mut().zip(dy.row(i)) {
                            *v += d;
                        }
                    }
                }
            }
            Op::SumSq(x) => {
                let s = 2.0 * dy.item();
                let xv = self.value(*x);
                let g = self.slot(grads, *x);
                for (v, u) in g.data_mut().iter_mut().zip(xv.data()) {
                    *v += s * u;
                }
            }
            Op::Sum(x) => {
                let s = dy.item();
                for v in self.slot(grads, *x).data_mut() {
                    *v += s;
                }
            }
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cos: &Tensor = &node.value;
                for r in 0..av.rows() {
                    let (na, nb) = (norm_a[r], norm_b[r]);
                    if na < COSINE_EPS || nb < COSINE_EPS {
                        continue;
                    }
                    let d = dy.get(r, 0);
                    let c = cos.get(r, 0);
                    let (x, y) = (av.row(r), bv.row(r));
                    if self.wants(*a) {
                        let g = self.slot(grads, *a);
                        for (k, v) in g.row_mut(r).iter_mut().enumerate() {
                            *v += d * (y[k] / (na * nb) - c * x[k] / (na * na));
                        }
                    }
                    if self.wants(*b) {
                        let g = self.slot(grads, *b);
                        for (k, v) in g.row_mut(r).iter_mut().enumerate() {
                            *v += d * (x[k] / (na * nb) - c * y[k] / (nb * nb));
                        }
                    }
                }
            }
        }
    }
}
