//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every forward operation appends a node holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes once, newest
//! first, and accumulates gradients into per-node buffers. Only the
//! operations the RP-CATE graph uses are provided.
//!
//! ```
//! use rpcate::tape::Tape;
//! use rpcate::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::scalar(0.0));
//! let s = tape.sigmoid(w).unwrap();
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(w).data()[0], 0.25);
//! ```

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `rhs` is either the same shape as `lhs` or a `1 × cols` row broadcast over it.
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Pool {
        input: Var,
        mode: PoolMode,
        /// Flat input offset of the selected element, per output cell (max mode only).
        argmax: Vec<usize>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Sqrt(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build a new tape per forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient has node shape"),
            None => Tensor::zeros(&shape),
        }
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (p, q) = self.value(a).dims2()?;
        let (q2, r) = self.value(b).dims2()?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![p, q],
                rhs: vec![q2, r],
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let orow = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let aik = ad[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[k * r..(k + 1) * r];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let value = Tensor::matrix(p, r, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a + b`, where `b` may also be a `1 × cols` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = sa != sb && sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1];
        if sa != sb && !broadcast {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let data: Vec<f64> = if broadcast {
            let cols = sb[1];
            ad.iter().enumerate().map(|(i, &x)| x + bd[i % cols]).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| x + y).collect()
        };
        let value = Tensor::new(sa, data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("hadamard", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("hadamard", value, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| c * x);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Row-wise softmax over the last axis of a matrix, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * cols..(i + 1) * cols];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push("softmax", value, Op::SoftmaxRows(a), &[a])
    }

    /// Global spatial pooling `m×k×k×n → m×n` (pool plus squeeze).
    pub fn pool_spatial(&mut self, a: Var, mode: PoolMode) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let (m, k1, k2, n) = match shape[..] {
            [m, k1, k2, n] if k1 == k2 => (m, k1, k2, n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "pool_spatial",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let src = self.value(a).data();
        let cells = k1 * k2;
        let mut out = vec![0.0; m * n];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; m * n];
        }
        for i in 0..m {
            for c in 0..n {
                let base = i * cells * n + c;
                match mode {
                    PoolMode::Max => {
                        let mut best = base;
                        for s in 1..cells {
                            let off = base + s * n;
                            if src[off] > src[best] {
                                best = off;
                            }
                        }
                        out[i * n + c] = src[best];
                        argmax[i * n + c] = best;
                    }
                    PoolMode::Avg => {
                        let total: f64 = (0..cells).map(|s| src[base + s * n]).sum();
                        out[i * n + c] = total / cells as f64;
                    }
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("pool_spatial", value, Op::Pool { input: a, mode, argmax }, &[a])
    }

    /// Output row `j` is input row `index[j]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(a).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        if index.is_empty() {
            return Err(TensorError::BadShape(vec![0, cols]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::matrix(index.len(), cols, out)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::BadShape(vec![0]))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(TensorError::NonFinite { op: "sqrt" });
        }
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..count).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.value(*a).dims2().expect("rank 2");
                let (_, r) = self.value(*b).dims2().expect("rank 2");
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let bd = self.value(*b).data();
                    let ga = acc(grads, *a, p * q);
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &bd[k * r..(k + 1) * r];
                            ga[i * q + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let ad = self.value(*a).data();
                    let gb = acc(grads, *b, q * r);
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = ad[i * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *dst += aik * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let blen = self.value(*b).len();
                    let gb = acc(grads, *b, blen);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % blen] += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    for (dst, &gv) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *dst -= gv;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    for ((dst, &gv), &bv) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bd) {
                        *dst += gv * bv;
                    }
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    for ((dst, &gv), &av) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(ad) {
                        *dst += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (dst, &gv) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *dst += c * gv;
                }
            }
            Op::Sigmoid(a) => {
                for ((dst, &gv), &s) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    *dst += gv * s * (1.0 - s);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                for ((dst, &gv), &xv) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *dst += gv;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.shape()[1];
                let ga = acc(grads, *a, g.len());
                for ((dst, grow), srow) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    for ((d, &gv), &s) in dst.iter_mut().zip(grow).zip(srow) {
                        *d += s * (gv - dot);
                    }
                }
            }
            Op::Pool { input, mode, argmax } => {
                let shape = self.shape(*input);
                let (k1, k2, n) = (shape[1], shape[2], shape[3]);
                let cells = k1 * k2;
                let len = self.value(*input).len();
                let ga = acc(grads, *input, len);
                match mode {
                    PoolMode::Max => {
                        for (&off, &gv) in argmax.iter().zip(g) {
                            ga[off] += gv;
                        }
                    }
                    PoolMode::Avg => {
                        let inv = 1.0 / cells as f64;
                        for (cell, &gv) in g.iter().enumerate() {
                            let (i, c) = (cell / n, cell % n);
                            let base = i * cells * n + c;
                            for s in 0..cells {
                                ga[base + s * n] += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::Gather { input, index } => {
                let cols = node.value.shape()[1];
                let len = self.value(*input).len();
                let ga = acc(grads, *input, len);
                for (j, &src) in index.iter().enumerate() {
                    add_into(&mut ga[src * cols..(src + 1) * cols], &g[j * cols..(j + 1) * cols]);
                }
            }
            Op::Reshape(a) => add_into(acc(grads, *a, g.len()), g),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        add_into(acc(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                for dst in acc(grads, *a, len).iter_mut() {
                    *dst += g[0];
                }
            }
            Op::Sqrt(a) => {
                for ((dst, &gv), &r) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    if r > 0.0 {
                        *dst += gv * 0.5 / r;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
