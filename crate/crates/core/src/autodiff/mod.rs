//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles in
//! creation order. Because inputs always precede outputs, creation order is a
//! topological order and [`Var::backward`] is a single reverse sweep.
//!
//! Every forward result is checked for non-finite values; an offending op
//! returns [`Error::NonFinite`] naming itself instead of propagating NaN.

mod tensor;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

pub use tensor::Tensor;
use tensor::broadcast_shape;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
}

impl ReduceOp {
    fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::LogSumExp => "logsumexp",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Reduce {
        kind: ReduceOp,
        input: NodeId,
        axis: Option<usize>,
    },
    Reshape(NodeId),
    RepeatRows(NodeId, usize),
    Select(NodeId, usize),
    Stack(Vec<NodeId>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient in [`Var::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        // Ops on constants are folded into constant leaves.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn checked(&self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push(value, kind, requires_grad))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    pub fn unary(self, kind: UnaryOp) -> Result<Var<'g>> {
        let x = self.value();
        let data: Vec<f64> = match kind {
            UnaryOp::Neg => x.data().iter().map(|v| -v).collect(),
            UnaryOp::Exp => x.data().iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.data().iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
            UnaryOp::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Softplus => x.data().iter().map(|&v| softplus(v)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.graph
            .checked(kind.name(), value, Op::Unary(kind, self.id), self.requires_grad())
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary(UnaryOp::Softplus)
    }

    /// Elementwise binary op with suffix broadcasting.
    pub fn binary(self, kind: BinaryOp, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(kind.name(), a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let (la, lb) = (ad.len(), bd.len());
        let n: usize = shape.iter().product();
        if kind == BinaryOp::Div && bd.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data: Vec<f64> = if la == lb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ad.iter().cycle().zip(bd.iter().cycle()).take(n).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.checked(
            kind.name(),
            Tensor::new(shape, data)?,
            Op::Binary(kind, self.id, other.id),
            rg,
        )
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// Multiply by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let value = self.value().map(|v| v * c);
        self.graph
            .checked("scale", value, Op::Scale(self.id, c), self.requires_grad())
    }

    /// Add a constant.
    pub fn offset(self, c: f64) -> Result<Var<'g>> {
        let value = self.value().map(|v| v + c);
        self.graph
            .checked("offset", value, Op::Offset(self.id), self.requires_grad())
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Result<Var<'g>> {
        self.neg()?.offset(1.0)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let a = self.value();
        let b = other.value();
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.checked(
            "matmul",
            Tensor::new(vec![m, n], data)?,
            Op::MatMul(self.id, other.id),
            rg,
        )
    }

    /// Reduction over `axis`, or over every element when `axis` is `None`.
    pub fn reduce(self, kind: ReduceOp, axis: Option<usize>) -> Result<Var<'g>> {
        let x = self.value();
        let (outer, n, inner, out_shape) = reduce_layout(x.shape(), axis)?;
        if n == 0 {
            return Err(Error::Domain {
                op: kind.name(),
                detail: "empty reduction axis".into(),
            });
        }
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| xd[(o * n + j) * inner + i];
                out[o * inner + i] = match kind {
                    ReduceOp::Sum => (0..n).map(at).sum(),
                    ReduceOp::Mean => (0..n).map(at).sum::<f64>() / n as f64,
                    ReduceOp::LogSumExp => {
                        let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                        if m.is_infinite() {
                            m
                        } else {
                            m + (0..n).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                        }
                    }
                };
            }
        }
        self.graph.checked(
            kind.name(),
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                kind,
                input: self.id,
                axis,
            },
            self.requires_grad(),
        )
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Sum, None)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Sum, Some(axis))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Mean, None)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceOp::Mean, Some(axis))
    }

    pub fn logsumexp(self) -> Result<Var<'g>> {
        self.reduce(ReduceOp::LogSumExp, None)
    }

    pub fn logsumexp_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceOp::LogSumExp, Some(axis))
    }

    /// Sum over the trailing axis.
    pub fn sum_last(self) -> Result<Var<'g>> {
        let nd = self.shape().len();
        if nd == 0 {
            return Ok(self);
        }
        self.sum_axis(nd - 1)
    }

    /// Same values, cut off from the gradient flow.
    pub fn stop_gradient(self) -> Var<'g> {
        self.graph.constant(self.value().as_ref().clone())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshape(shape)?;
        Ok(self
            .graph
            .push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Tile along the leading axis: `[r, ..]` becomes `[times * r, ..]` with
    /// copy `k` occupying rows `k*r .. (k+1)*r`.
    pub fn repeat_rows(self, times: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() == 0 || times == 0 {
            return Err(Error::Domain {
                op: "repeat_rows",
                detail: format!("shape {:?}, times {times}", x.shape()),
            });
        }
        let mut shape = x.shape().to_vec();
        shape[0] *= times;
        let mut data = Vec::with_capacity(x.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(x.data());
        }
        Ok(self.graph.push(
            Tensor::new(shape, data)?,
            Op::RepeatRows(self.id, times),
            self.requires_grad(),
        ))
    }

    /// Index `index` of the trailing axis, dropping that axis.
    pub fn select(self, index: usize) -> Result<Var<'g>> {
        let x = self.value();
        let Some((&n, lead)) = x.shape().split_last() else {
            return Err(Error::Domain {
                op: "select",
                detail: "scalar input".into(),
            });
        };
        if index >= n {
            return Err(Error::Domain {
                op: "select",
                detail: format!("index {index} out of range for width {n}"),
            });
        }
        let data = x.data().chunks(n).map(|row| row[index]).collect();
        Ok(self.graph.push(
            Tensor::new(lead.to_vec(), data)?,
            Op::Select(self.id, index),
            self.requires_grad(),
        ))
    }

    /// Stack equally shaped vars along a new trailing axis.
    pub fn stack(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::Domain {
            op: "stack",
            detail: "no inputs".into(),
        })?;
        let graph = first.graph;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p);
            if v.shape() != base.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: base,
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let width = parts.len();
        let len = values[0].numel();
        let mut data = vec![0.0; len * width];
        for (j, v) in values.iter().enumerate() {
            for (i, &x) in v.data().iter().enumerate() {
                data[i * width + j] = x;
            }
        }
        let mut shape = base;
        shape.push(width);
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(graph.push(
            Tensor::new(shape, data)?,
            Op::Stack(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Reverse sweep from this scalar; returns gradients of every
    /// `requires_grad` leaf.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.graph.nodes.borrow();
        let root = &nodes[self.id.0];
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss is detached from every parameter".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id.0 + 1];
        grads[self.id.0] = Some(vec![1.0]);

        for idx in (0..=self.id.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = HashMap::new();
        for (idx, node) in nodes.iter().enumerate().take(self.id.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(NodeId(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a scalar with respect to the parameter leaves of its graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `(outer, n, inner, output shape)` for reducing `shape` over `axis`.
fn reduce_layout(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, Vec::new())),
        Some(ax) if ax < shape.len() => {
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out = shape.to_vec();
            out.remove(ax);
            Ok((outer, shape[ax], inner, out))
        }
        Some(ax) => Err(Error::Domain {
            op: "reduce",
            detail: format!("axis {ax} out of range for shape {shape:?}"),
        }),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |id: NodeId| nodes[id.0].requires_grad;
    let val = |id: NodeId| nodes[id.0].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x).data();
            let y = node.value.data();
            accumulate(grads, *x, xv.len(), |acc| {
                for i in 0..acc.len() {
                    acc[i] += match kind {
                        UnaryOp::Neg => -g[i],
                        UnaryOp::Exp => g[i] * y[i],
                        UnaryOp::Log => g[i] / xv[i],
                        UnaryOp::Tanh => g[i] * (1.0 - y[i] * y[i]),
                        UnaryOp::Sigmoid => g[i] * y[i] * (1.0 - y[i]),
                        UnaryOp::Softplus => g[i] * sigmoid(xv[i]),
                    };
                }
            });
        }
        Op::Binary(kind, a, b) => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            let (la, lb) = (ad.len(), bd.len());
            // Suffix broadcasting: operand index is the output index modulo
            // the operand length, so cycling iterators walk both in step.
            if wants(*a) {
                accumulate(grads, *a, la, |acc| {
                    let mut ai = 0;
                    for (&gi, &bv) in g.iter().zip(bd.iter().cycle()) {
                        acc[ai] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => gi,
                            BinaryOp::Mul => gi * bv,
                            BinaryOp::Div => gi / bv,
                        };
                        ai += 1;
                        if ai == la {
                            ai = 0;
                        }
                    }
                });
            }
            if wants(*b) {
                accumulate(grads, *b, lb, |acc| {
                    let mut bi = 0;
                    for (&gi, &av) in g.iter().zip(ad.iter().cycle()) {
                        acc[bi] += match kind {
                            BinaryOp::Add => gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * av,
                            BinaryOp::Div => {
                                let bv = bd[bi];
                                -gi * av / (bv * bv)
                            }
                        };
                        bi += 1;
                        if bi == lb {
                            bi = 0;
                        }
                    }
                });
            }
        }
        Op::Scale(x, c) => {
            if wants(*x) {
                accumulate(grads, *x, g.len(), |acc| {
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi * c;
                    }
                });
            }
        }
        Op::Offset(x) | Op::Reshape(x) => {
            if wants(*x) {
                accumulate(grads, *x, g.len(), |acc| {
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                });
            }
        }
        Op::MatMul(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if wants(*a) {
                // dA = dC · Bᵀ
                let bt = transpose_raw(bv.data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                accumulate(grads, *a, m * k, |acc| {
                    for (x, d) in acc.iter_mut().zip(&da) {
                        *x += d;
                    }
                });
            }
            if wants(*b) {
                // dB = Aᵀ · dC
                let at = transpose_raw(av.data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(grads, *b, k * n, |acc| {
                    for (x, d) in acc.iter_mut().zip(&db) {
                        *x += d;
                    }
                });
            }
        }
        Op::Reduce { kind, input, axis } => {
            if !wants(*input) {
                return;
            }
            let x = val(*input);
            let (outer, n, inner, _) =
                reduce_layout(x.shape(), *axis).expect("layout validated in forward");
            let xd = x.data();
            let y = node.value.data();
            accumulate(grads, *input, xd.len(), |acc| {
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            acc[at] += match kind {
                                ReduceOp::Sum => gi,
                                ReduceOp::Mean => gi / n as f64,
                                ReduceOp::LogSumExp => gi * (xd[at] - y[o * inner + i]).exp(),
                            };
                        }
                    }
                }
            });
        }
        Op::RepeatRows(x, times) => {
            if wants(*x) {
                let len = g.len() / times;
                accumulate(grads, *x, len, |acc| {
                    for block in g.chunks(len) {
                        for (a, gi) in acc.iter_mut().zip(block) {
                            *a += gi;
                        }
                    }
                });
            }
        }
        Op::Select(x, index) => {
            if wants(*x) {
                let xv = val(*x);
                let width = *xv.shape().last().expect("select input has an axis");
                accumulate(grads, *x, xv.numel(), |acc| {
                    for (r, gi) in g.iter().enumerate() {
                        acc[r * width + index] += gi;
                    }
                });
            }
        }
        Op::Stack(parts) => {
            let width = parts.len();
            for (j, p) in parts.iter().enumerate() {
                if wants(*p) {
                    let len = g.len() / width;
                    accumulate(grads, *p, len, |acc| {
                        for (i, a) in acc.iter_mut().enumerate() {
                            *a += g[i * width + j];
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        assert_eq!(g.scalar(0.0).tanh().unwrap().item(), 0.0);
        let sp = g.scalar(0.0).softplus().unwrap().item();
        assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn elementwise_errors() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
        let z = g.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(z.ln(), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(a.div(z), Err(Error::Domain { op: "div", .. })));
        let big = g.scalar(1000.0);
        assert!(matches!(big.exp(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let c = g.constant(t(&[2, 1], &[5.0, 7.0]));
        let r = a.matmul(c).unwrap();
        assert_eq!(r.shape(), vec![2, 1]);
        assert_eq!(r.value().data(), &[5.0, 0.0]);
        let bad = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        assert!(a.matmul(bad).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = check_gradients(
            &[t(&[2, 3], &a), t(&[3, 4], &b)],
            |_, v| v[0].matmul(v[1])?.sum(),
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::new();
        let lse = g.constant(Tensor::vector(vec![0.0, 0.0])).logsumexp().unwrap();
        assert!((lse.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = g
            .constant(Tensor::vector(vec![1000.0, 1000.0]))
            .logsumexp()
            .unwrap();
        assert!((big.item() - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(m.sum_axis(0).unwrap().value().data(), &[4.0, 6.0]);
        assert_eq!(m.sum_axis(1).unwrap().value().data(), &[3.0, 7.0]);
        assert_eq!(m.mean().unwrap().item(), 2.5);
        let empty = g.constant(Tensor::zeros(&[0]));
        assert!(empty.sum().is_err());
        assert!(m.sum_axis(2).is_err());
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let grads = x.square().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 6.0);

        let g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let grads = x.tanh().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(x.exp().unwrap().backward(), Err(Error::Backward(_))));
        let c = g.scalar(2.0);
        assert!(matches!(c.exp().unwrap().backward(), Err(Error::Backward(_))));
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::vector(vec![1.0, 1.0]));
        let grads = x.square().unwrap().backward().unwrap();
        assert_eq!(grads.get(&unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn stop_gradient_freezes_factor() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let frozen = x.stop_gradient();
        assert_eq!(frozen.item(), x.item());
        let grads = frozen.mul(x).unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 2.0);
    }

    #[test]
    fn structural_ops() {
        let g = Graph::new();
        let m = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let col = m.select(1).unwrap();
        assert_eq!(col.value().data(), &[2.0, 5.0]);
        let st = Var::stack(&[col, col.scale(2.0).unwrap()]).unwrap();
        assert_eq!(st.shape(), vec![2, 2]);
        assert_eq!(st.value().data(), &[2.0, 4.0, 5.0, 10.0]);
        let rep = m.repeat_rows(2).unwrap();
        assert_eq!(rep.shape(), vec![4, 3]);
        assert_eq!(&rep.value().data()[6..], m.value().data());
        let grads = rep.sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&m).unwrap().data(), &[2.0; 6]);
    }

    #[test]
    fn graph_rebuilt_from_same_inputs_gives_identical_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let data: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = Graph::new();
            let w = g.param(t(&[4, 5], &data));
            let x = g.constant(t(&[3, 4], &data[..12]));
            let loss = x.matmul(w).unwrap().tanh().unwrap().logsumexp().unwrap();
            loss.backward().unwrap().get(&w).unwrap().clone()
        };
        assert_eq!(run(), run());
    }
}
