//! Graph-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every node lives in an arena owned by [`Graph`]. The backward pass is
//! expressed with the same operations as the forward pass and is appended to
//! the arena, so a gradient is itself a differentiable node. This is what the
//! gradient penalty needs: the critic's input gradient is computed once, its
//! norm is penalised, and the penalty is differentiated again with respect to
//! the critic weights.
//!
//! Piecewise-constant local derivatives (the ReLU mask) are recorded as
//! constants, so second derivatives through a ReLU are zero, as they are
//! almost everywhere.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow(Var, Var),
    BroadcastRows(Var),
    SumRows(Var),
    BroadcastCols(Var),
    SumCols(Var),
    SumAll(Var),
    BroadcastAll(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Relu(Var),
    Mask(Var, Tensor<S>),
    Softplus(Var),
    Softmax(Var),
    Reshape(Var),
    ShiftRows { x: Var, shift: isize, period: usize },
    SliceCols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    PadRows { x: Var, start: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Arena of tensor-valued nodes.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    decisions: Vec<u64>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A leaf node. Whether it is a parameter or a constant depends only on
    /// what is later passed to [`Graph::grad`].
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v`'s value as a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    /// Record a discrete choice made while building the graph (e.g. a greedy
    /// token); it contributes to [`Graph::branch_signature`].
    pub fn record_decision(&mut self, d: u64) {
        self.decisions.push(d);
    }

    /// Hash of every piecewise choice taken by the forward pass: ReLU
    /// activation patterns and recorded decisions. Two evaluations with the
    /// same signature lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.decisions.hash(&mut h);
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.nodes[x.0].value.data() {
                    (v > S::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = self.value(a).matmul(self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x + bias` with a `1×c` bias broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "add_row bias shape");
        let mut v = self.value(x).clone();
        let bv = self.value(bias).data();
        for i in 0..r {
            for (o, &b) in v.row_mut(i).iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let v = Tensor::from_vec(rows, c, self.value(x).data().repeat(rows));
        self.push(v, Op::BroadcastRows(x))
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, &e) in out.data_mut().iter_mut().zip(xv.row(i)) {
                *o = *o + e;
            }
        }
        self.push(out, Op::SumRows(x))
    }

    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(c, 1, "broadcast_cols expects a single column");
        let xv = self.value(x);
        let v = Tensor::from_fn(r, cols, |i, _| xv.get(i, 0));
        self.push(v, Op::BroadcastCols(x))
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let r = xv.rows();
        let v = Tensor::from_fn(r, 1, |i, _| xv.row(i).iter().copied().sum());
        self.push(v, Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::of(n as f64))
    }

    pub fn broadcast_all(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(x), (1, 1), "broadcast_all expects a scalar");
        let v = Tensor::filled(rows, cols, self.value(x).item());
        self.push(v, Op::BroadcastAll(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.ln());
        self.push(v, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.sqrt());
        self.push(v, Op::Sqrt(x))
    }

    /// Elementwise `1/x`, defined as 0 at `x = 0`.
    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(safe_recip);
        self.push(v, Op::Recip(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(S::zero()));
        self.push(v, Op::Relu(x))
    }

    /// Elementwise product with a constant tensor.
    pub fn mask(&mut self, x: Var, mask: Tensor<S>) -> Var {
        let v = self.value(x).zip_map(&mask, |a, m| a * m);
        self.push(v, Op::Mask(x, mask))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x))
    }

    /// Treats the rows of `x` as consecutive blocks of `period` time steps and
    /// shifts each block: output row `t` of a block is input row `t + shift`
    /// of the same block, or zero when that falls outside the block.
    pub fn shift_rows(&mut self, x: Var, shift: isize, period: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        assert!(period > 0 && r % period == 0, "shift_rows period mismatch");
        let mut out = Tensor::zeros(r, c);
        for blk in 0..r / period {
            for t in 0..period {
                let src = t as isize + shift;
                if src >= 0 && (src as usize) < period {
                    out.row_mut(blk * period + t)
                        .copy_from_slice(xv.row(blk * period + src as usize));
                }
            }
        }
        self.push(out, Op::ShiftRows { x, shift, period })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(xv.rows() * len);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::from_vec(xv.rows(), len, data);
        self.push(v, Op::SliceCols { x, start })
    }

    /// Embeds `x` at column offset `start` of a zero tensor with `total` columns.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        assert!(start + c <= total, "pad_cols out of range");
        let mut out = Tensor::zeros(r, total);
        for i in 0..r {
            out.row_mut(i)[start..start + c].copy_from_slice(xv.row(i));
        }
        self.push(out, Op::PadCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let c = pv.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + c].copy_from_slice(pv.row(i));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let c = xv.cols();
        let v = Tensor::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec());
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn pad_rows(&mut self, x: Var, start: usize, total: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        assert!(start + r <= total, "pad_rows out of range");
        let mut out = Tensor::zeros(total, c);
        out.data_mut()[start * c..(start + r) * c].copy_from_slice(xv.data());
        self.push(out, Op::PadRows { x, start })
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned nodes are part of the graph and can be differentiated
    /// again. A `wrt` entry that `output` does not depend on gets a zero node.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), (1, 1), "grad of a non-scalar output");
        let seed = self.leaf(Tensor::scalar(S::one()));
        self.grad_with_seed(output, seed, wrt)
    }

    /// Vector-Jacobian product: backpropagates `seed` (shaped like `output`).
    pub fn grad_with_seed(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), self.shape(seed), "seed shape");
        let n = output.0 + 1;

        // Nodes downstream of some `wrt` entry; only they carry gradient.
        let mut relevant = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if relevant[i] {
                continue;
            }
            relevant[i] = parents(&self.nodes[i].op).iter().any(|p| relevant[p.0]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (p, contribution) in self.backward_op(Var(i), &op, g) {
                if !relevant[p.0] {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, contribution),
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.leaf(Tensor::zeros(r, c))
                }
            })
            .collect()
    }

    fn backward_op(&mut self, out: Var, op: &Op<S>, g: Var) -> Vec<(Var, Var)> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b);
                let gb = self.mul(g, a);
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, s) => vec![(a, self.scale(g, s))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MatMul { a, b, ta, tb } => {
                let ga = if ta {
                    self.matmul_t(b, g, tb, true)
                } else {
                    self.matmul_t(g, b, false, !tb)
                };
                let gb = if tb {
                    self.matmul_t(g, a, true, ta)
                } else {
                    self.matmul_t(a, g, !ta, false)
                };
                vec![(a, ga), (b, gb)]
            }
            Op::AddRow(x, bias) => {
                let gb = self.sum_rows(g);
                vec![(x, g), (bias, gb)]
            }
            Op::BroadcastRows(x) => vec![(x, self.sum_rows(g))],
            Op::SumRows(x) => {
                let r = self.shape(x).0;
                vec![(x, self.broadcast_rows(g, r))]
            }
            Op::BroadcastCols(x) => vec![(x, self.sum_cols(g))],
            Op::SumCols(x) => {
                let c = self.shape(x).1;
                vec![(x, self.broadcast_cols(g, c))]
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(x);
                vec![(x, self.broadcast_all(g, r, c))]
            }
            Op::BroadcastAll(x) => vec![(x, self.sum_all(g))],
            Op::Tanh(x) => {
                // 1 - y²
                let y2 = self.mul(out, out);
                let neg = self.neg(y2);
                let d = self.add_scalar(neg, S::one());
                vec![(x, self.mul(g, d))]
            }
            Op::Sigmoid(x) => {
                let neg = self.neg(out);
                let one_minus = self.add_scalar(neg, S::one());
                let d = self.mul(out, one_minus);
                vec![(x, self.mul(g, d))]
            }
            Op::Exp(x) => vec![(x, self.mul(g, out))],
            Op::Log(x) => {
                let r = self.recip(x);
                vec![(x, self.mul(g, r))]
            }
            Op::Sqrt(x) => {
                let r = self.recip(out);
                let half = self.scale(r, S::of(0.5));
                vec![(x, self.mul(g, half))]
            }
            Op::Recip(x) => {
                let r2 = self.mul(out, out);
                let t = self.mul(g, r2);
                vec![(x, self.neg(t))]
            }
            Op::Relu(x) => {
                let m = self.value(x).map(|a| {
                    if a > S::zero() {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                vec![(x, self.mask(g, m))]
            }
            Op::Mask(x, ref m) => {
                let m = m.clone();
                vec![(x, self.mask(g, m))]
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(x);
                vec![(x, self.mul(g, s))]
            }
            Op::Softmax(x) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let c = self.shape(x).1;
                let gy = self.mul(g, out);
                let s = self.sum_cols(gy);
                let sb = self.broadcast_cols(s, c);
                let d = self.sub(g, sb);
                vec![(x, self.mul(out, d))]
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(x);
                vec![(x, self.reshape(g, r, c))]
            }
            Op::ShiftRows { x, shift, period } => vec![(x, self.shift_rows(g, -shift, period))],
            Op::SliceCols { x, start } => {
                let total = self.shape(x).1;
                vec![(x, self.pad_cols(g, start, total))]
            }
            Op::PadCols { x, start } => {
                let len = self.shape(x).1;
                vec![(x, self.slice_cols(g, start, len))]
            }
            Op::ConcatCols(ref parts) => {
                let parts = parts.clone();
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.shape(p).1;
                    out.push((p, self.slice_cols(g, off, c)));
                    off += c;
                }
                out
            }
            Op::SliceRows { x, start } => {
                let total = self.shape(x).0;
                vec![(x, self.pad_rows(g, start, total))]
            }
            Op::PadRows { x, start } => {
                let len = self.shape(x).0;
                vec![(x, self.slice_rows(g, start, len))]
            }
        }
    }
}

fn parents<S>(op: &Op<S>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::BroadcastRows(x)
        | Op::SumRows(x)
        | Op::BroadcastCols(x)
        | Op::SumCols(x)
        | Op::SumAll(x)
        | Op::BroadcastAll(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Sqrt(x)
        | Op::Recip(x)
        | Op::Relu(x)
        | Op::Mask(x, _)
        | Op::Softplus(x)
        | Op::Softmax(x)
        | Op::Reshape(x)
        | Op::ShiftRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::PadCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::PadRows { x, .. } => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn safe_recip<S: Scalar>(x: S) -> S {
    if x == S::zero() {
        S::zero()
    } else {
        S::one() / x
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (r, c) = x.shape();
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let o = out.row_mut(i);
        let mut total = S::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - max).exp();
            total = total + *dst;
        }
        for dst in o.iter_mut() {
            *dst = *dst / total;
        }
    }
    out
}
