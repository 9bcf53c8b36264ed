use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{EngineError, Index, Tensor};

pub type NodeId = usize;

/// A fused operation with a hand-written backward pass.
pub trait CustomOp: fmt::Debug {
    /// Accumulates into `grads[i]` (present only for inputs that need a
    /// gradient) the contribution of the output gradient `g`.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], g: &[f64], grads: &mut [Option<&mut [f64]>]);
}

#[derive(Debug)]
enum Op {
    Leaf,
    Custom { inputs: Vec<NodeId>, op: Rc<dyn CustomOp> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    PowInt(NodeId, i32),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Mean(NodeId),
    SumLastdim(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Gather { src: NodeId, idx: Rc<Index> },
    Scatter { values: NodeId, idx: Rc<Index> },
}

#[derive(Debug)]
struct Node {
    shape: Rc<[usize]>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations for one forward/backward pass.
///
/// Nodes are pushed in evaluation order, so parents always precede their
/// children and a single reverse sweep visits every node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<NodeId>>,
    consumed: Cell<bool>,
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    shape: Rc<[usize]>,
    value: Rc<Vec<f64>>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_id: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter created with [`Tape::param`].
    pub fn get(&self, param: &Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&param.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), EngineError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFinite { op })
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
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let shape: Rc<[usize]> = shape.into();
        let value = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: shape.clone(),
            value: value.clone(),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            shape,
            value,
        }
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Registers a trainable leaf. Its gradient is always present in the
    /// result of [`Tape::backward`], zero when unreachable from the loss.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        let var = self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            Op::Leaf,
            true,
        );
        self.params.borrow_mut().push(var.id);
        var
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let shape = value.shape().to_vec();
        self.push(shape, value.into_data(), Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Concatenates along the last axis. All inputs must share leading dims.
    pub fn concat_lastdim<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, EngineError> {
        let first = parts.first().ok_or(EngineError::Empty { op: "concat" })?;
        let lead = &first.shape[..first.shape.len().saturating_sub(1)];
        if first.shape.is_empty() {
            return Err(EngineError::Rank { op: "concat", rank: 0 });
        }
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape.is_empty() || p.shape[..p.shape.len() - 1] != *lead {
                return Err(EngineError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.to_vec(),
                    rhs: p.shape.to_vec(),
                });
            }
            widths.push(*p.shape.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.value[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| self.requires_grad(p.id));
        Ok(self.push(
            shape,
            out,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Records the result of a fused operation. Inputs must be distinct.
    pub fn custom<'t>(
        &'t self,
        inputs: &[&Var<'t>],
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Rc<dyn CustomOp>,
    ) -> Result<Var<'t>, EngineError> {
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(EngineError::ForeignVar);
        }
        if numel(&shape) != value.len() {
            return Err(EngineError::ShapeMismatch {
                op: "custom",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        check_finite("custom", &value)?;
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        if ids.iter().enumerate().any(|(i, a)| ids[..i].contains(a)) {
            return Err(EngineError::Domain { op: "custom (repeated input)" });
        }
        let rg = ids.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(shape, value, Op::Custom { inputs: ids, op }, rg))
    }

    /// Reverse accumulation from a scalar `loss`. A tape can be consumed once.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients, EngineError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(EngineError::ForeignVar);
        }
        if self.consumed.replace(true) {
            return Err(EngineError::TapeConsumed);
        }
        if loss.value.len() != 1 {
            return Err(EngineError::NotScalar {
                shape: loss.shape.to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut by_id = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                by_id.insert(id, Tensor::new(node.shape.to_vec(), g)?);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }

        for &pid in self.params.borrow().iter() {
            by_id
                .entry(pid)
                .or_insert_with(|| Tensor::zeros(&nodes[pid].shape));
        }
        Ok(Gradients { by_id })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// Adds `g * local(i)` into a (possibly broadcast) parent gradient.
fn acc_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if let Some(dst) = slot(grads, nodes, id) {
        let n = dst.len();
        if n == g.len() {
            for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += gi * local(i);
            }
        } else {
            for (i, gi) in g.iter().enumerate() {
                dst[i % n] += gi * local(i);
            }
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Custom { inputs, op } => {
            let mut taken: Vec<Option<Vec<f64>>> = inputs
                .iter()
                .map(|&i| {
                    nodes[i]
                        .requires_grad
                        .then(|| grads[i].take().unwrap_or_else(|| vec![0.0; nodes[i].value.len()]))
                })
                .collect();
            let vals: Vec<&[f64]> = inputs.iter().map(|&i| nodes[i].value.as_slice()).collect();
            let mut views: Vec<Option<&mut [f64]>> = taken.iter_mut().map(|t| t.as_deref_mut()).collect();
            op.backward(&vals, out, g, &mut views);
            for (&i, t) in inputs.iter().zip(taken) {
                if t.is_some() {
                    grads[i] = t;
                }
            }
        }
        Op::Add(a, b) => {
            acc_broadcast(grads, nodes, *a, g, |_| 1.0);
            acc_broadcast(grads, nodes, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            acc_broadcast(grads, nodes, *a, g, |_| 1.0);
            acc_broadcast(grads, nodes, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (na, nb) = (av.len(), bv.len());
            acc_broadcast(grads, nodes, *a, g, |i| bv[i % nb]);
            acc_broadcast(grads, nodes, *b, g, |i| av[i % na]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (na, nb) = (av.len(), bv.len());
            acc_broadcast(grads, nodes, *a, g, |i| 1.0 / bv[i % nb]);
            acc_broadcast(grads, nodes, *b, g, |i| {
                let d = bv[i % nb];
                -av[i % na] / (d * d)
            });
        }
        Op::Neg(a) => acc_broadcast(grads, nodes, *a, g, |_| -1.0),
        Op::PowInt(a, n) => {
            let av = &nodes[*a].value;
            let n = *n;
            acc_broadcast(grads, nodes, *a, g, |i| f64::from(n) * av[i].powi(n - 1));
        }
        Op::Exp(a) => acc_broadcast(grads, nodes, *a, g, |i| out[i]),
        Op::Log(a) => {
            let av = &nodes[*a].value;
            acc_broadcast(grads, nodes, *a, g, |i| 1.0 / av[i]);
        }
        Op::Tanh(a) => acc_broadcast(grads, nodes, *a, g, |i| 1.0 - out[i] * out[i]),
        Op::Silu(a) => {
            let av = &nodes[*a].value;
            acc_broadcast(grads, nodes, *a, g, |i| {
                let s = sigmoid(av[i]);
                s * (1.0 + av[i] * (1.0 - s))
            });
        }
        Op::Square(a) => {
            let av = &nodes[*a].value;
            acc_broadcast(grads, nodes, *a, g, |i| 2.0 * av[i]);
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            acc_broadcast(grads, nodes, *a, g, |i| {
                if av[i] > 0.0 {
                    1.0
                } else if av[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = &nodes[*x].value;
            let (lo, hi) = (*lo, *hi);
            acc_broadcast(grads, nodes, *x, g, |i| {
                if xv[i] > lo && xv[i] < hi {
                    1.0
                } else {
                    0.0
                }
            });
        }
        Op::Sum(a) => {
            let g0 = g[0];
            if let Some(dst) = slot(grads, nodes, *a) {
                dst.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::Mean(a) => {
            if let Some(dst) = slot(grads, nodes, *a) {
                let s = g[0] / dst.len() as f64;
                dst.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumLastdim(a) => {
            let last = *nodes[*a].shape.last().unwrap();
            if let Some(dst) = slot(grads, nodes, *a) {
                for (r, gr) in g.iter().enumerate() {
                    dst[r * last..(r + 1) * last]
                        .iter_mut()
                        .for_each(|d| *d += gr);
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(da) = slot(grads, nodes, *a) {
                // dA = dC · Bᵀ
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let s: f64 = gi.iter().zip(brow).map(|(x, y)| x * y).sum();
                        da[i * k + p] += s;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, gv) in drow.iter_mut().zip(gi) {
                            *d += a_ip * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(dst) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => acc_broadcast(grads, nodes, *a, g, |_| 1.0),
        Op::Concat(parts) => {
            let total = *node.shape.last().unwrap();
            let rows = g.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].shape.last().unwrap();
                if let Some(dst) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for m in 0..w {
                            dst[r * w + m] += g[r * total + offset + m];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Gather { src, idx } => {
            let src_len = *nodes[*src].shape.last().unwrap();
            let m = *idx.shape().last().unwrap();
            if let Some(dst) = slot(grads, nodes, *src) {
                let src_rows = dst.len() / src_len;
                let idx_rows = idx.data().len() / m;
                let rows = g.len() / m;
                for p in 0..rows {
                    let sbase = (p % src_rows) * src_len;
                    let ibase = (p % idx_rows) * m;
                    for k in 0..m {
                        dst[sbase + idx.data()[ibase + k]] += g[p * m + k];
                    }
                }
            }
        }
        Op::Scatter { values, idx } => {
            let m = *idx.shape().last().unwrap();
            let size = *node.shape.last().unwrap();
            if let Some(dst) = slot(grads, nodes, *values) {
                let idx_rows = idx.data().len() / m;
                let rows = dst.len() / m;
                for p in 0..rows {
                    let ibase = (p % idx_rows) * m;
                    for k in 0..m {
                        dst[p * m + k] += g[p * size + idx.data()[ibase + k]];
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.value
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.value.to_vec()).expect("consistent node")
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> Option<f64> {
        (self.value.len() == 1).then(|| self.value[0])
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<(), EngineError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(EngineError::ForeignVar)
        }
    }

    fn rg(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, EngineError> {
        self.same_tape(other)?;
        let (sa, sb) = (&*self.shape, &*other.shape);
        let shape = if sa == sb || is_suffix(sb, sa) {
            sa.to_vec()
        } else if is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(EngineError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let (av, bv) = (&*self.value, &*other.value);
        let n = numel(&shape);
        let data: Vec<f64> = if av.len() == n && bv.len() == n {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if bv.len() == 1 {
            av.iter().map(|&x| f(x, bv[0])).collect()
        } else if av.len() == 1 {
            bv.iter().map(|&y| f(av[0], y)).collect()
        } else {
            let (na, nb) = (av.len(), bv.len());
            (0..n).map(|i| f(av[i % na], bv[i % nb])).collect()
        };
        check_finite(op_name, &data)?;
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(shape, data, op, rg))
    }

    fn unary(
        &self,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, EngineError> {
        let data: Vec<f64> = self.value.iter().map(|&x| f(x)).collect();
        check_finite(op_name, &data)?;
        Ok(self.tape.push(self.shape.to_vec(), data, op, self.rg()))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, EngineError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, EngineError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, EngineError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>, EngineError> {
        if other.value.iter().any(|&v| v == 0.0) {
            return Err(EngineError::Domain { op: "div" });
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// `self + c` for a constant scalar.
    pub fn shift(&self, c: f64) -> Result<Var<'t>, EngineError> {
        self.add(&self.tape.scalar(c))
    }

    /// `self * c` for a constant scalar.
    pub fn scale(&self, c: f64) -> Result<Var<'t>, EngineError> {
        self.mul(&self.tape.scalar(c))
    }

    pub fn neg(&self) -> Result<Var<'t>, EngineError> {
        self.unary("neg", |x| -x, Op::Neg(self.id))
    }

    pub fn pow_int(&self, n: i32) -> Result<Var<'t>, EngineError> {
        if n < 1 && self.value.iter().any(|&v| v == 0.0) {
            return Err(EngineError::Domain { op: "pow_int" });
        }
        self.unary("pow_int", |x| x.powi(n), Op::PowInt(self.id, n))
    }

    pub fn exp(&self) -> Result<Var<'t>, EngineError> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>, EngineError> {
        if self.value.iter().any(|&v| v <= 0.0) {
            return Err(EngineError::Domain { op: "log" });
        }
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t>, EngineError> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Var<'t>, EngineError> {
        self.unary("silu", |x| x * sigmoid(x), Op::Silu(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>, EngineError> {
        self.unary("square", |x| x * x, Op::Square(self.id))
    }

    pub fn abs(&self) -> Result<Var<'t>, EngineError> {
        self.unary("abs", f64::abs, Op::Abs(self.id))
    }

    /// Elementwise floor as a constant: no gradient flows through it.
    pub fn floor_detached(&self) -> Var<'t> {
        let data = self.value.iter().map(|v| v.floor()).collect();
        self.tape.push(self.shape.to_vec(), data, Op::Leaf, false)
    }

    /// Clamp into `[lo, hi]` with constant bounds. The gradient passes
    /// where `lo < x < hi` and is zero where the input was clamped or sits
    /// exactly on a bound.
    pub fn clamp_detached(&self, lo: f64, hi: f64) -> Result<Var<'t>, EngineError> {
        self.unary(
            "clamp",
            |x| x.clamp(lo, hi),
            Op::Clamp { x: self.id, lo, hi },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>, EngineError> {
        let s: f64 = self.value.iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.tape.push(Vec::new(), vec![s], Op::Sum(self.id), self.rg()))
    }

    pub fn mean(&self) -> Result<Var<'t>, EngineError> {
        if self.value.is_empty() {
            return Err(EngineError::Empty { op: "mean" });
        }
        let s: f64 = self.value.iter().sum::<f64>() / self.value.len() as f64;
        check_finite("mean", &[s])?;
        Ok(self.tape.push(Vec::new(), vec![s], Op::Mean(self.id), self.rg()))
    }

    pub fn sum_lastdim(&self) -> Result<Var<'t>, EngineError> {
        let (&last, lead) = self
            .shape
            .split_last()
            .ok_or(EngineError::Rank { op: "sum_lastdim", rank: 0 })?;
        let data: Vec<f64> = if last == 0 {
            vec![0.0; numel(lead)]
        } else {
            self.value.chunks(last).map(|c| c.iter().sum()).collect()
        };
        check_finite("sum_lastdim", &data)?;
        Ok(self
            .tape
            .push(lead.to_vec(), data, Op::SumLastdim(self.id), self.rg()))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, EngineError> {
        self.same_tape(other)?;
        let (sa, sb) = (&*self.shape, &*other.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&*self.value, &*other.value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = av[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += a_ip * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        let rg = self.rg() || other.rg();
        Ok(self
            .tape
            .push(vec![m, n], out, Op::Matmul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>, EngineError> {
        if self.shape.len() != 2 {
            return Err(EngineError::Rank {
                op: "transpose",
                rank: self.shape.len(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.value[i * c + j];
            }
        }
        Ok(self
            .tape
            .push(vec![c, r], out, Op::Transpose(self.id), self.rg()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, EngineError> {
        if numel(shape) != self.value.len() {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(
            shape.to_vec(),
            self.value.to_vec(),
            Op::Reshape(self.id),
            self.rg(),
        ))
    }

    /// `out[p, m] = self[p, idx[p, m]]` along the last axis. The leading dims
    /// of `self` and `idx` must agree up to leading-batch expansion.
    pub fn gather_lastdim(&self, idx: &Rc<Index>) -> Result<Var<'t>, EngineError> {
        let (&src_len, s_lead) = self
            .shape
            .split_last()
            .ok_or(EngineError::Rank { op: "gather", rank: 0 })?;
        let (&m, i_lead) = idx
            .shape()
            .split_last()
            .ok_or(EngineError::Rank { op: "gather", rank: 0 })?;
        let lead = if is_suffix(s_lead, i_lead) {
            i_lead
        } else if is_suffix(i_lead, s_lead) {
            s_lead
        } else {
            return Err(EngineError::ShapeMismatch {
                op: "gather",
                lhs: self.shape.to_vec(),
                rhs: idx.shape().to_vec(),
            });
        };
        if let Some(&bad) = idx.data().iter().find(|&&i| i >= src_len) {
            return Err(EngineError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: src_len,
            });
        }
        let rows = numel(lead);
        let (src_rows, idx_rows) = (numel(s_lead), numel(i_lead));
        let mut out = Vec::with_capacity(rows * m);
        for p in 0..rows {
            let sbase = (p % src_rows) * src_len;
            let ibase = (p % idx_rows) * m;
            out.extend(
                idx.data()[ibase..ibase + m]
                    .iter()
                    .map(|&j| self.value[sbase + j]),
            );
        }
        let mut shape = lead.to_vec();
        shape.push(m);
        Ok(self.tape.push(
            shape,
            out,
            Op::Gather {
                src: self.id,
                idx: idx.clone(),
            },
            self.rg(),
        ))
    }

    /// `out[p, idx[p, m]] += self[p, m]` into a zeroed last axis of length
    /// `size`. Positions are accumulated in ascending `m`.
    pub fn scatter_add_lastdim(&self, idx: &Rc<Index>, size: usize) -> Result<Var<'t>, EngineError> {
        let (&m, v_lead) = self
            .shape
            .split_last()
            .ok_or(EngineError::Rank { op: "scatter", rank: 0 })?;
        let (&mi, i_lead) = idx
            .shape()
            .split_last()
            .ok_or(EngineError::Rank { op: "scatter", rank: 0 })?;
        if mi != m || !is_suffix(i_lead, v_lead) {
            return Err(EngineError::ShapeMismatch {
                op: "scatter",
                lhs: self.shape.to_vec(),
                rhs: idx.shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.data().iter().find(|&&i| i >= size) {
            return Err(EngineError::IndexOutOfRange {
                op: "scatter",
                index: bad,
                len: size,
            });
        }
        let rows = numel(v_lead);
        let idx_rows = numel(i_lead);
        let mut out = vec![0.0; rows * size];
        for p in 0..rows {
            let ibase = (p % idx_rows) * m;
            for k in 0..m {
                out[p * size + idx.data()[ibase + k]] += self.value[p * m + k];
            }
        }
        check_finite("scatter", &out)?;
        let mut shape = v_lead.to_vec();
        shape.push(size);
        Ok(self.tape.push(
            shape,
            out,
            Op::Scatter {
                values: self.id,
                idx: idx.clone(),
            },
            self.rg(),
        ))
    }
}
