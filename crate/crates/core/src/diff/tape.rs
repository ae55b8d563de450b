//! Reverse-mode differentiation over a linear record of tensor primitives.
//!
//! Every primitive application appends one node holding its forward value.
//! Nodes only reference earlier nodes, so the record is topologically ordered
//! by construction and the reverse sweep is a single backwards pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

use super::params::{ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for "no source element" in a [`Tape::gather`] index.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Identifier of each primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Variable,
    Param(ParamId),
    /// `x · w + b`, `x: [r, i]`, `w: [i, o]`, `b: [o]`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    /// Per-row product: row `r` of `x` (`[r, n]`) times row `r` of `w`
    /// reshaped to `[n, m]`.
    RowMatMul { x: NodeId, w: NodeId, m: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScaleShift { a: NodeId, scale: f64, shift: f64 },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: usize, len: usize },
    Gather { a: NodeId, index: Vec<u32>, shape: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    RowSum { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Abs { a: NodeId },
    Elu { a: NodeId },
    LogSigmoid { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    SquaredError { a: NodeId, b: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::RowMatMul { .. } => "row_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RowSum { .. } => "row_sum",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "ln",
            Op::Abs { .. } => "abs",
            Op::Elu { .. } => "elu",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SquaredError { .. } => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Variable | Op::Param(_) => Vec::new(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::SquaredError { a, b } => vec![*a, *b],
            Op::RowMatMul { x, w, .. } => vec![*x, *w],
            Op::Concat { parts } => parts.clone(),
            Op::ScaleShift { a, .. }
            | Op::Slice { a, .. }
            | Op::Gather { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::RowSum { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Exp { a }
            | Op::Ln { a }
            | Op::Abs { a }
            | Op::Elu { a }
            | Op::LogSigmoid { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a } => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(NodeId, Op, Tensor)>,
}

impl Gradients {
    /// Gradient for a variable or parameter leaf, if the loss depends on it.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.leaves.iter().find(|(n, _, _)| *n == node).map(|(_, _, g)| g)
    }

    /// Adds parameter-leaf gradients into the accumulators of `params`.
    pub fn accumulate_into(&self, params: &mut ParameterSet) {
        for (_, op, g) in &self.leaves {
            if let Op::Param(id) = op {
                params.grad_mut(*id).add_assign(g);
            }
        }
    }
}

/// The computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - math::ln_1p(math::exp(-x.abs()))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0].op
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) => true,
            other => other.inputs().iter().any(|n| self.nodes[n.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, node: NodeId) -> Result<&Tensor> {
        self.nodes.get(node.0).map(|n| &n.value).ok_or(Error::UnknownNode(node.0))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    /// A differentiable leaf that is not part of any parameter registry.
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Variable)
    }

    /// Copies a registered parameter onto the tape as a differentiable leaf.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Result<NodeId> {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    /// Same value as `a` with the gradient path cut.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.check(a)?.clone();
        self.push(v, Op::Constant)
    }

    /// Applies a primitive by identifier. `op` must not be a leaf.
    pub fn apply(&mut self, op: Op) -> Result<NodeId> {
        for n in op.inputs() {
            self.check(n)?;
        }
        let value = self.forward_value(&op)?;
        self.push(value, op)
    }

    fn forward_value(&self, op: &Op) -> Result<Tensor> {
        let v = |n: &NodeId| &self.nodes[n.0].value;
        Ok(match op {
            Op::Constant | Op::Variable | Op::Param(_) => {
                return Err(Error::InvalidArgument("leaf ops are created with constant/variable/param".into()))
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (v(x), v(w), v(b));
                let (r, i) = (x.rows(), x.cols());
                if w.shape().len() != 2 || w.shape()[0] != i || b.len() != w.shape()[1] {
                    return Err(shape_err(
                        "affine",
                        format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                    ));
                }
                let o = w.shape()[1];
                let mut out = Vec::with_capacity(r * o);
                for row in 0..r {
                    out.extend_from_slice(b.data());
                    let acc = &mut out[row * o..(row + 1) * o];
                    matvec_acc(x.row(row), w.data(), o, acc);
                }
                Tensor::from_parts(vec![r, o], out)
            }
            Op::MatMul { a, b } => {
                let (a, b) = (v(a), v(b));
                let (r, k) = (a.rows(), a.cols());
                if b.shape().len() != 2 || b.shape()[0] != k {
                    return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let o = b.shape()[1];
                let mut out = vec![0.0; r * o];
                for row in 0..r {
                    matvec_acc(a.row(row), b.data(), o, &mut out[row * o..(row + 1) * o]);
                }
                Tensor::from_parts(vec![r, o], out)
            }
            Op::RowMatMul { x, w, m } => {
                let (x, w) = (v(x), v(w));
                let (r, n) = (x.rows(), x.cols());
                if *m == 0 || w.rows() != r || w.cols() != n * m {
                    return Err(shape_err(
                        "row_matmul",
                        format!("x {:?}, w {:?}, m {m}", x.shape(), w.shape()),
                    ));
                }
                let mut out = vec![0.0; r * m];
                for row in 0..r {
                    matvec_acc(x.row(row), w.row(row), *m, &mut out[row * m..(row + 1) * m]);
                }
                Tensor::from_parts(vec![r, *m], out)
            }
            Op::Add { a, b } => zip_same("add", v(a), v(b), |x, y| x + y)?,
            Op::Sub { a, b } => zip_same("sub", v(a), v(b), |x, y| x - y)?,
            Op::Mul { a, b } => zip_same("mul", v(a), v(b), |x, y| x * y)?,
            Op::SquaredError { a, b } => zip_same("squared_error", v(a), v(b), |x, y| (x - y) * (x - y))?,
            Op::ScaleShift { a, scale, shift } => map(v(a), |x| x * scale + shift),
            Op::Concat { parts } => {
                if parts.is_empty() {
                    return Err(shape_err("concat", "no inputs".into()));
                }
                let rows = v(&parts[0]).rows();
                if parts.iter().any(|p| v(p).rows() != rows) {
                    return Err(shape_err("concat", "row counts differ".into()));
                }
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(v(p).row(r));
                    }
                }
                Tensor::from_parts(vec![rows, total], out)
            }
            Op::Slice { a, start, len } => {
                let a = v(a);
                if *len == 0 || start + len > a.cols() {
                    return Err(shape_err("slice", format!("[{start}, {start}+{len}) of {:?}", a.shape())));
                }
                let mut out = Vec::with_capacity(a.rows() * len);
                for r in 0..a.rows() {
                    out.extend_from_slice(&a.row(r)[*start..start + len]);
                }
                Tensor::from_parts(vec![a.rows(), *len], out)
            }
            Op::Gather { a, index, shape } => {
                let a = v(a);
                if index.is_empty() || shape.iter().product::<usize>() != index.len() {
                    return Err(shape_err("gather", format!("index length {} vs shape {shape:?}", index.len())));
                }
                let mut out = Vec::with_capacity(index.len());
                for &ix in index {
                    if ix == GATHER_ZERO {
                        out.push(0.0);
                    } else if (ix as usize) < a.len() {
                        out.push(a.data()[ix as usize]);
                    } else {
                        return Err(shape_err("gather", format!("index {ix} out of {}", a.len())));
                    }
                }
                Tensor::from_parts(shape.clone(), out)
            }
            Op::Sum { a } => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean { a } => {
                let a = v(a);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::RowSum { a } => {
                let a = v(a);
                let out = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
                Tensor::from_parts(vec![a.rows(), 1], out)
            }
            Op::Sigmoid { a } => map(v(a), sigmoid),
            Op::Tanh { a } => map(v(a), math::tanh),
            Op::Exp { a } => map(v(a), math::exp),
            Op::Ln { a } => map(v(a), math::ln),
            Op::Abs { a } => map(v(a), f64::abs),
            Op::Elu { a } => map(v(a), |x| if x > 0.0 { x } else { math::exp_m1(x) }),
            Op::LogSigmoid { a } => map(v(a), log_sigmoid),
            Op::Softmax { a } => {
                let a = v(a);
                let c = a.cols();
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(c) {
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|x| *x = math::exp(*x - lse));
                }
                Tensor::from_parts(vec![a.rows(), c], out)
            }
            Op::LogSoftmax { a } => {
                let a = v(a);
                let c = a.cols();
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(c) {
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|x| *x -= lse);
                }
                Tensor::from_parts(vec![a.rows(), c], out)
            }
        })
    }

    // Convenience wrappers.

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Affine { x, w, b })
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { a, b })
    }
    pub fn row_matmul(&mut self, x: NodeId, w: NodeId, m: usize) -> Result<NodeId> {
        self.apply(Op::RowMatMul { x, w, m })
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add { a, b })
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub { a, b })
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul { a, b })
    }
    pub fn scale_shift(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Op::ScaleShift { a, scale, shift })
    }
    pub fn scale(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.scale_shift(a, scale, 0.0)
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat { parts: parts.to_vec() })
    }
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { a, start, len })
    }
    /// Flat gather into a tensor of shape `shape`; [`GATHER_ZERO`] entries yield 0.
    pub fn gather(&mut self, a: NodeId, index: Vec<u32>, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Gather { a, index, shape: shape.to_vec() })
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum { a })
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean { a })
    }
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSum { a })
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid { a })
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh { a })
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp { a })
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Ln { a })
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs { a })
    }
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Elu { a })
    }
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSigmoid { a })
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax { a })
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax { a })
    }
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::SquaredError { a, b })
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// variable and parameter leaf the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let l = self.check(loss)?;
        if !l.is_scalar() {
            return Err(Error::NonScalarLoss(l.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Variable | Op::Param(_) => {
                    leaves.push((NodeId(idx), node.op.clone(), Tensor::from_parts(node.value.shape().to_vec(), g)));
                }
                op => self.backward_op(op, &node.value, &g, &mut grads)?,
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `params`.
    pub fn backward_into(&self, loss: NodeId, params: &mut ParameterSet) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(params);
        Ok(g)
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |n: NodeId| &self.nodes[n.0].value;
        let wants = |n: NodeId| self.nodes[n.0].requires_grad;
        match op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, i, o) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if wants(*b) {
                    let gb = accum(grads, *b, o);
                    for row in g.chunks(o) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
                if wants(*w) {
                    let gw = accum(grads, *w, i * o);
                    for row in 0..r {
                        outer_acc(xv.row(row), &g[row * o..(row + 1) * o], gw);
                    }
                }
                if wants(*x) {
                    let gx = accum(grads, *x, r * i);
                    for row in 0..r {
                        matvec_t_acc(wv.data(), &g[row * o..(row + 1) * o], &mut gx[row * i..(row + 1) * i]);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (r, k, o) = (av.rows(), av.cols(), bv.shape()[1]);
                if wants(*b) {
                    let gb = accum(grads, *b, k * o);
                    for row in 0..r {
                        outer_acc(av.row(row), &g[row * o..(row + 1) * o], gb);
                    }
                }
                if wants(*a) {
                    let ga = accum(grads, *a, r * k);
                    for row in 0..r {
                        matvec_t_acc(bv.data(), &g[row * o..(row + 1) * o], &mut ga[row * k..(row + 1) * k]);
                    }
                }
            }
            Op::RowMatMul { x, w, m } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, n) = (xv.rows(), xv.cols());
                let m = *m;
                if wants(*w) {
                    let gw = accum(grads, *w, r * n * m);
                    for row in 0..r {
                        outer_acc(xv.row(row), &g[row * m..(row + 1) * m], &mut gw[row * n * m..(row + 1) * n * m]);
                    }
                }
                if wants(*x) {
                    let gx = accum(grads, *x, r * n);
                    for row in 0..r {
                        matvec_t_acc(wv.row(row), &g[row * m..(row + 1) * m], &mut gx[row * n..(row + 1) * n]);
                    }
                }
            }
            Op::Add { a, b } => {
                for n in [*a, *b] {
                    if wants(n) {
                        add_into(accum(grads, n, g.len()), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add_into(accum(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let gb = accum(grads, *b, g.len());
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = accum(grads, *a, g.len());
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    let gb = accum(grads, *b, g.len());
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::SquaredError { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = accum(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += 2.0 * (av[i] - bv[i]) * g[i];
                    }
                }
                if wants(*b) {
                    let gb = accum(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= 2.0 * (av[i] - bv[i]) * g[i];
                    }
                }
            }
            Op::ScaleShift { a, scale, .. } => {
                let ga = accum(grads, *a, g.len());
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s * scale;
                }
            }
            Op::Concat { parts } => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if wants(*p) {
                        let gp = accum(grads, *p, rows * c);
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice { a, start, len } => {
                let av = val(*a);
                let c = av.cols();
                let ga = accum(grads, *a, av.len());
                for r in 0..av.rows() {
                    add_into(&mut ga[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::Gather { a, index, .. } => {
                let ga = accum(grads, *a, val(*a).len());
                for (s, &ix) in g.iter().zip(index) {
                    if ix != GATHER_ZERO {
                        ga[ix as usize] += s;
                    }
                }
            }
            Op::Sum { a } => {
                let ga = accum(grads, *a, val(*a).len());
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                let s = g[0] / n as f64;
                accum(grads, *a, n).iter_mut().for_each(|d| *d += s);
            }
            Op::RowSum { a } => {
                let av = val(*a);
                let c = av.cols();
                let ga = accum(grads, *a, av.len());
                for (r, s) in g.iter().enumerate() {
                    ga[r * c..(r + 1) * c].iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Sigmoid { a } => unary(grads, *a, g, |i| out.data()[i] * (1.0 - out.data()[i])),
            Op::Tanh { a } => unary(grads, *a, g, |i| 1.0 - out.data()[i] * out.data()[i]),
            Op::Exp { a } => unary(grads, *a, g, |i| out.data()[i]),
            Op::Ln { a } => {
                let x = val(*a).data();
                unary(grads, *a, g, |i| 1.0 / x[i])
            }
            Op::Abs { a } => {
                let x = val(*a).data();
                unary(grads, *a, g, |i| {
                    if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Elu { a } => {
                let x = val(*a).data();
                unary(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { out.data()[i] + 1.0 })
            }
            Op::LogSigmoid { a } => {
                let x = val(*a).data();
                unary(grads, *a, g, |i| sigmoid(-x[i]))
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let ga = accum(grads, *a, out.len());
                for (r, (y, gy)) in out.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        ga[r * c + k] += y[k] * (gy[k] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let c = out.cols();
                let ga = accum(grads, *a, out.len());
                for (r, (y, gy)) in out.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let total: f64 = gy.iter().sum();
                    for k in 0..c {
                        ga[r * c + k] += gy[k] - math::exp(y[k]) * total;
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.len() != b.len() || a.cols() != b.cols() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    m + math::ln(row.iter().map(|x| math::exp(x - m)).sum::<f64>())
}

/// `acc[j] += Σ_k x[k] * w[k * o + j]`, summing `k` in increasing order.
#[inline]
fn matvec_acc(x: &[f64], w: &[f64], o: usize, acc: &mut [f64]) {
    for (k, xk) in x.iter().enumerate() {
        if *xk == 0.0 {
            continue;
        }
        let wr = &w[k * o..(k + 1) * o];
        for (a, wv) in acc.iter_mut().zip(wr) {
            *a += xk * wv;
        }
    }
}

/// `acc[k] += Σ_j w[k * o + j] * g[j]`.
#[inline]
fn matvec_t_acc(w: &[f64], g: &[f64], acc: &mut [f64]) {
    let o = g.len();
    for (k, a) in acc.iter_mut().enumerate() {
        let wr = &w[k * o..(k + 1) * o];
        *a += wr.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
    }
}

/// `acc[k * o + j] += x[k] * g[j]`.
#[inline]
fn outer_acc(x: &[f64], g: &[f64], acc: &mut [f64]) {
    let o = g.len();
    for (k, xk) in x.iter().enumerate() {
        if *xk == 0.0 {
            continue;
        }
        for (a, gv) in acc[k * o..(k + 1) * o].iter_mut().zip(g) {
            *a += xk * gv;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], n: NodeId, len: usize) -> &mut Vec<f64> {
    grads[n.0].get_or_insert_with(|| vec![0.0; len])
}

fn unary(grads: &mut [Option<Vec<f64>>], a: NodeId, g: &[f64], d: impl Fn(usize) -> f64) {
    let ga = accum(grads, a, g.len());
    for (i, s) in g.iter().enumerate() {
        ga[i] += s * d(i);
    }
}
