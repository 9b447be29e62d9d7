//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its value and
//! the ids of its inputs. Nodes are appended in evaluation order, so walking
//! the node list backwards is a valid reverse topological order.
//!
//! Parameter leaves borrow their storage from the caller (`Tape<'p>`), which
//! keeps large embedding tables from being copied on every forward pass.
//!
//! ```
//! use skelstory::autodiff::Tape;
//! use skelstory::tensor::Tensor;
//!
//! let w = Tensor::vector(vec![1.0, 2.0]);
//! let mut tape = Tape::new();
//! let wv = tape.param(&w);
//! let y = tape.mul(wv, wv).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(wv).data(), &[2.0, 4.0]);
//! ```

use std::borrow::Cow;

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    // the left operand is a vector repeated over the rows of the right one
    Left,
    Right,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    LogSoftmax(usize),
    Nll {
        input: usize,
        targets: Vec<usize>,
    },
    Sum(usize),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    Gather {
        table: usize,
        row: usize,
    },
    Stack(Vec<usize>),
    Pick {
        input: usize,
        index: usize,
    },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf whose storage is borrowed.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: Cow::Owned(t.into_data()),
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Vec<f64>,
        shape: Vec<usize>,
        kind: Op,
    ) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        let requires_grad = match &kind {
            Op::Leaf => false,
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => self.rg(*a) || self.rg(*b),
            Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Scale(a, _)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => self.rg(*a),
            Op::Nll { input, .. } | Op::Slice { input, .. } | Op::Pick { input, .. } => {
                self.rg(*input)
            }
            Op::Gather { table, .. } => self.rg(*table),
            Op::Concat(ids) | Op::Stack(ids) => ids.iter().any(|&i| self.rg(i)),
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Dispatches on `op`; binary kinds need `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        if op.is_binary() {
            let b = b.ok_or(TensorError::Empty("elementwise: missing second operand"))?;
            return match op {
                ElementwiseOp::Add => self.add(a, b),
                ElementwiseOp::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            };
        }
        match op {
            ElementwiseOp::Tanh => self.tanh(a),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Exp => self.exp(a),
            _ => self.log(a),
        }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((Broadcast::None, sa.to_vec()));
        }
        if sb.len() == 1 && sa.len() >= 2 && sb[0] == last_dim(sa) {
            return Ok((Broadcast::Right, sa.to_vec()));
        }
        if sa.len() == 1 && sb.len() >= 2 && sa[0] == last_dim(sb) {
            return Ok((Broadcast::Left, sb.to_vec()));
        }
        Err(TensorError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var> {
        let (bc, shape) = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let value: Vec<f64> = match bc {
            Broadcast::None => va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Right => {
                let d = vb.len();
                va.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[i % d]))
                    .collect()
            }
            Broadcast::Left => {
                let d = va.len();
                vb.iter()
                    .enumerate()
                    .map(|(i, &y)| f(va[i % d], y))
                    .collect()
            }
        };
        self.push(name, value, shape, make(a.0, b.0, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, value, shape, op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        self.unary("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a.0, factor))
    }

    /// Matrix product. A 1-D left operand is a row vector, a 1-D right
    /// operand a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(mismatch()),
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let brow = &vb[p * n..(p + 1) * n];
                for (d, &y) in dst.iter_mut().zip(brow) {
                    *d += x * y;
                }
            }
        }
        let mut shape = Vec::new();
        if sa.len() == 2 {
            shape.push(m);
        }
        if sb.len() == 2 {
            shape.push(n);
        }
        self.push(
            "matmul",
            out,
            shape,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        )
    }

    /// Log-softmax over the last axis, with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if self.value(x).is_empty() || shape.is_empty() {
            return Err(TensorError::Empty("log_softmax"));
        }
        let d = last_dim(&shape);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            out.extend(log_softmax_slice(row));
        }
        self.push("log_softmax", out, shape, Op::LogSoftmax(x.0))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probs
    /// `log_probs` (shape `T×V`, or `V` for a single step).
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(log_probs).to_vec();
        let (t, v) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "nll_loss",
                    left: shape,
                    right: vec![targets.len()],
                })
            }
        };
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "nll_loss",
                left: shape,
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "nll_loss",
                index: bad,
                size: v,
            });
        }
        let lp = self.value(log_probs);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -lp[i * v + y])
            .sum();
        self.push(
            "nll_loss",
            vec![total / t as f64],
            Vec::new(),
            Op::Nll {
                input: log_probs.0,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![s], Vec::new(), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat"));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(p).to_vec(),
                    right: vec![],
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        self.push(
            "concat",
            out,
            vec![len],
            Op::Concat(parts.iter().map(|v| v.0).collect()),
        )
    }

    /// Contiguous sub-range of a 1-D vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let size = self.value(a).len();
        if self.shape(a).len() != 1 || start + len > size || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size,
            });
        }
        let out = self.value(a)[start..start + len].to_vec();
        self.push("slice", out, vec![len], Op::Slice { input: a.0, start })
    }

    /// Row `row` of a matrix, as a vector (embedding lookup).
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: shape,
                right: vec![row],
            });
        }
        if row >= shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: row,
                size: shape[0],
            });
        }
        let d = shape[1];
        let out = self.value(table)[row * d..(row + 1) * d].to_vec();
        self.push(
            "gather",
            out,
            vec![d],
            Op::Gather {
                table: table.0,
                row,
            },
        )
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(TensorError::Empty("stack"))?;
        let d = self.value(first).len();
        let mut out = Vec::with_capacity(d * rows.len());
        for &r in rows {
            if self.shape(r).len() != 1 || self.value(r).len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: self.shape(first).to_vec(),
                    right: self.shape(r).to_vec(),
                });
            }
            out.extend_from_slice(self.value(r));
        }
        self.push(
            "stack",
            out,
            vec![rows.len(), d],
            Op::Stack(rows.iter().map(|v| v.0).collect()),
        )
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let size = self.value(a).len();
        if index >= size {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index,
                size,
            });
        }
        let v = self.value(a)[index];
        self.push("pick", vec![v], Vec::new(), Op::Pick { input: a.0, index })
    }

    /// Propagates d`loss`/d(node) to every node and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.acc_broadcast(grads, *a, *b, *bc, g, |gi, _, _| gi, |gi, _, _| gi);
            }
            Op::Sub(a, b, bc) => {
                self.acc_broadcast(grads, *a, *b, *bc, g, |gi, _, _| gi, |gi, _, _| -gi);
            }
            Op::Mul(a, b, bc) => {
                self.acc_broadcast(grads, *a, *b, *bc, g, |gi, _, y| gi * y, |gi, x, _| gi * x);
            }
            Op::Tanh(a) => self.acc_map(grads, *a, |j| g[j] * (1.0 - out[j] * out[j])),
            Op::Sigmoid(a) => self.acc_map(grads, *a, |j| g[j] * out[j] * (1.0 - out[j])),
            Op::Exp(a) => self.acc_map(grads, *a, |j| g[j] * out[j]),
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                self.acc_map(grads, *a, |j| g[j] / x[j]);
            }
            Op::Scale(a, f) => self.acc_map(grads, *a, |j| g[j] * f),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let gb = slot(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = va[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d = last_dim(&node.shape);
                let ga = slot(grads, *a, out.len());
                for (r, (orow, grow)) in out.chunks(d).zip(g.chunks(d)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for j in 0..d {
                        ga[r * d + j] += grow[j] - orow[j].exp() * total;
                    }
                }
            }
            Op::Nll { input, targets } => {
                let len = self.nodes[*input].value.len();
                let v = len / targets.len();
                let scale = g[0] / targets.len() as f64;
                let gi = slot(grads, *input, len);
                for (t, &y) in targets.iter().enumerate() {
                    gi[t * v + y] -= scale;
                }
            }
            Op::Sum(a) => self.acc_map(grads, *a, |_| g[0]),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if self.rg(p) {
                        let gp = slot(grads, p, len);
                        for (d, s) in gp.iter_mut().zip(&g[off..off + len]) {
                            *d += s;
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { input, start } => {
                let len = self.nodes[*input].value.len();
                let gi = slot(grads, *input, len);
                for (d, s) in gi[*start..*start + g.len()].iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Gather { table, row } => {
                let len = self.nodes[*table].value.len();
                let d = g.len();
                let gt = slot(grads, *table, len);
                for (dst, s) in gt[row * d..(row + 1) * d].iter_mut().zip(g) {
                    *dst += s;
                }
            }
            Op::Stack(rows) => {
                let d = last_dim(&node.shape);
                for (r, &p) in rows.iter().enumerate() {
                    if self.rg(p) {
                        let gp = slot(grads, p, d);
                        for (dst, s) in gp.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Pick { input, index } => {
                let len = self.nodes[*input].value.len();
                slot(grads, *input, len)[*index] += g[0];
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], a: usize, f: impl Fn(usize) -> f64) {
        if !self.rg(a) {
            return;
        }
        let len = self.nodes[a].value.len();
        let ga = slot(grads, a, len);
        for (j, d) in ga.iter_mut().enumerate() {
            *d += f(j);
        }
    }

    /// `fa(g, x, y)` and `fb(g, x, y)` give the local gradient contributions
    /// for one output element with operand values `x` (left) and `y` (right).
    #[allow(clippy::too_many_arguments)]
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: usize,
        b: usize,
        bc: Broadcast,
        g: &[f64],
        fa: impl Fn(f64, f64, f64) -> f64,
        fb: impl Fn(f64, f64, f64) -> f64,
    ) {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let (la, lb) = (va.len(), vb.len());
        let x_at = |j: usize| va[j % la];
        let y_at = |j: usize| vb[j % lb];
        if self.rg(a) {
            let ga = slot(grads, a, la);
            for (j, &gj) in g.iter().enumerate() {
                let idx = if bc == Broadcast::Left { j % la } else { j };
                ga[idx] += fa(gj, x_at(j), y_at(j));
            }
        }
        if self.rg(b) {
            let gb = slot(grads, b, lb);
            for (j, &gj) in g.iter().enumerate() {
                let idx = if bc == Broadcast::Right { j % lb } else { j };
                gb[idx] += fb(gj, x_at(j), y_at(j));
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable log-softmax of a plain slice.
pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Gradients produced by [`Tape::backward`]. Leaves that were not reachable
/// from the loss report zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None if shape.is_empty() => Tensor::scalar(0.0),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind on a second call.
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient matches node shape"),
            None if shape.is_empty() => Tensor::scalar(0.0),
            None => Tensor::zeros(&shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn add_vectors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = t.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0; 3]));
        let c = t.tanh(a).unwrap();
        assert_eq!(t.value(c), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(a), Err(TensorError::NonPositiveLog(_))));
    }

    #[test]
    fn binary_kind_needs_operand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0]));
        assert!(t.elementwise(ElementwiseOp::Mul, a, None).is_err());
    }

    #[test]
    fn broadcast_vector_over_rows() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = t.constant(Tensor::vector(vec![10.0, 20.0]));
        let c = t.add(m, v).unwrap();
        assert_eq!(t.shape(c), &[2, 2]);
        assert_eq!(t.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let d = t.sub(v, m).unwrap();
        assert_eq!(t.value(d), &[9.0, 18.0, 7.0, 16.0]);
    }

    #[test]
    fn matmul_identity_and_column() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let id = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = t.matmul(a, id).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let col = t.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let d = t.matmul(a, col).unwrap();
        assert_eq!(t.shape(d), &[2, 1]);
        assert_eq!(t.value(d), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(
            t.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_softmax_cases() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let la = t.log_softmax(a).unwrap();
        assert!(close(t.value(la), &[0.5f64.ln(), 0.5f64.ln()], 1e-15));
        let b = t.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let lb = t.log_softmax(b).unwrap();
        assert!(close(
            t.value(lb),
            &[(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln()],
            1e-15
        ));
        let c = t.constant(Tensor::vector(vec![1000.0 + 2f64.ln(), 1000.0]));
        let lc = t.log_softmax(c).unwrap();
        assert!(close(t.value(lc), t.value(lb), 1e-12));
    }

    #[test]
    fn nll_loss_cases() {
        let mut t = Tape::new();
        let uniform = t.constant(Tensor::matrix(2, 4, vec![(0.25f64).ln(); 8]).unwrap());
        let l = t.nll_loss(uniform, &[0, 3]).unwrap();
        assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-12);
        let onehot = t.constant(Tensor::matrix(1, 2, vec![0.0, -50.0]).unwrap());
        let l2 = t.nll_loss(onehot, &[0]).unwrap();
        assert_eq!(t.scalar(l2), 0.0);
        assert!(matches!(
            t.nll_loss(uniform, &[0, 4]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let wv = t.param(&w);
        let y = t.tanh(wv).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let wv = t.param(&w);
        let c = t.constant(Tensor::scalar(3.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(wv).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let w = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut t = Tape::new();
        let wv = t.param(&w);
        let s = t.sum(wv).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(wv).data(), &[1.0; 6]);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(t.exp(a), Err(TensorError::NonFinite("exp"))));
    }
}
