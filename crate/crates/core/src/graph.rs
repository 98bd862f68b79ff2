//! Taped reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to a [`Graph`]. The
//! adjoint of each primitive is written in terms of other recorded
//! primitives, so a backward pass run with `differentiable = true` produces
//! gradients that are themselves graph nodes and can be differentiated
//! again. Gradient matching needs exactly this: the loss compares parameter
//! gradients, and its derivative with respect to the input flows through
//! them.
//!
//! A graph belongs to one thread. Build a fresh graph per evaluation; plain
//! [`Tensor`] values are what crosses thread boundaries.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, numel, ConvGeom, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Sqrt,
    Square,
    Exp,
    Log,
    /// `max(x, c)`; `c = 0` is ReLU.
    MaxScalar(f64),
    AddScalar,
    MulScalar(f64),
    SumKeep,
    Expand,
    Reshape,
    MatMul,
    Transpose,
    Conv2d(ConvGeom),
    Conv2dInputGrad(ConvGeom),
    Conv2dWeightGrad(ConvGeom),
    AvgPool(usize),
    AvgPoolBack(usize),
    Gather(Rc<Vec<usize>>),
    Scatter(Rc<Vec<usize>>),
    Slice { axis: usize, start: usize },
    Pad { axis: usize, before: usize },
    Concat(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    tracked: bool,
}

/// Whether new nodes remember how they were computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Nodes derived from tracked inputs are tracked and differentiable.
    Recording,
    /// Values are computed but every new node is a constant.
    NoGrad,
}

/// An append-only tape of eagerly evaluated tensor operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    mode: Cell<GradMode>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("mode", &self.mode.get())
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            mode: Cell::new(GradMode::Recording),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> GradMode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: GradMode) -> GradMode {
        self.mode.replace(mode)
    }

    /// A leaf whose gradient can be requested.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, Vec::new(), true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, value: Tensor, op: Op, inputs: Vec<usize>, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            tracked,
        });
        Var { graph: self, id }
    }

    fn record<'g>(&'g self, value: Tensor, op: Op, inputs: &[Var<'g>]) -> Var<'g> {
        let tracked = self.mode.get() == GradMode::Recording && inputs.iter().any(|v| v.is_tracked());
        if tracked {
            self.push_node(value, op, inputs.iter().map(|v| v.id).collect(), true)
        } else {
            self.push_node(value, Op::Leaf, Vec::new(), false)
        }
    }

    /// Gradients of the scalar `output` with respect to each entry of `wrt`.
    ///
    /// Entries that `output` does not depend on receive an all-zero gradient
    /// rather than an error. With `differentiable` set, the returned
    /// gradients are tracked nodes and support a further backward pass;
    /// otherwise they are constants.
    pub fn backward<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>], differentiable: bool) -> Result<Vec<Var<'g>>> {
        let out_shape = output.shape();
        if numel(&out_shape) != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let last = output.id;
        // nodes on some path from a `wrt` entry to the output
        let mut relevant = vec![false; last + 1];
        {
            let nodes = self.nodes.borrow();
            for v in wrt {
                if v.id <= last {
                    relevant[v.id] = true;
                }
            }
            for i in 0..=last {
                if !relevant[i] && nodes[i].tracked {
                    relevant[i] = nodes[i].inputs.iter().any(|&j| relevant[j]);
                }
            }
        }

        let previous = self.set_mode(if differentiable {
            GradMode::Recording
        } else {
            GradMode::NoGrad
        });
        let result = self.run_backward(output, &relevant);
        self.set_mode(previous);
        let grads = result?;

        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&v.shape())),
            })
            .collect())
    }

    fn run_backward<'g>(&'g self, output: Var<'g>, relevant: &[bool]) -> Result<Vec<Option<Var<'g>>>> {
        let last = output.id;
        let mut grads: Vec<Option<Var<'g>>> = vec![None; last + 1];
        if !relevant[last] {
            return Ok(grads);
        }
        grads[last] = Some(self.constant(Tensor::full(&output.shape(), 1.0)));
        for i in (0..=last).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs.clone())
            };
            if inputs.is_empty() {
                continue;
            }
            let needs: Vec<bool> = inputs.iter().map(|&j| relevant[j]).collect();
            let node = Var { graph: self, id: i };
            let ins: Vec<Var<'g>> = inputs.iter().map(|&j| Var { graph: self, id: j }).collect();
            let contributions = vjp(&op, node, &ins, g, &needs)?;
            for ((&j, c), need) in inputs.iter().zip(contributions).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(c) = c {
                    grads[j] = Some(match grads[j] {
                        Some(acc) => acc.add(c)?,
                        None => c,
                    });
                }
            }
        }
        Ok(grads)
    }

    /// First-order gradients as plain tensors.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Tensor>> {
        Ok(self
            .backward(output, wrt, false)?
            .into_iter()
            .map(|v| v.tensor())
            .collect())
    }
}

/// Vector-Jacobian products of one node, expressed with recorded primitives.
fn vjp<'g>(op: &Op, out: Var<'g>, ins: &[Var<'g>], g: Var<'g>, needs: &[bool]) -> Result<Vec<Option<Var<'g>>>> {
    let graph = out.graph;
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![Some(g), Some(g)],
        Op::Sub => vec![Some(g), if want(1) { Some(g.neg()?) } else { None }],
        Op::Mul => vec![
            if want(0) { Some(g.mul(ins[1])?) } else { None },
            if want(1) { Some(g.mul(ins[0])?) } else { None },
        ],
        Op::Div => {
            let ga = g.div(ins[1])?;
            vec![Some(ga), if want(1) { Some(ga.mul(out)?.neg()?) } else { None }]
        }
        Op::Neg => vec![Some(g.neg()?)],
        Op::Abs => {
            let sign = ins[0].value().map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
            vec![Some(g.mul(graph.constant(sign))?)]
        }
        Op::Sqrt => vec![Some(g.div(out)?.mul_scalar(0.5)?)],
        Op::Square => vec![Some(g.mul(ins[0])?.mul_scalar(2.0)?)],
        Op::Exp => vec![Some(g.mul(out)?)],
        Op::Log => vec![Some(g.div(ins[0])?)],
        Op::MaxScalar(c) => {
            let c = *c;
            let mask = ins[0].value().map(|v| if v > c { 1.0 } else { 0.0 });
            vec![Some(g.mul(graph.constant(mask))?)]
        }
        Op::AddScalar => vec![Some(g)],
        Op::MulScalar(c) => vec![Some(g.mul_scalar(*c)?)],
        Op::SumKeep => vec![Some(g.expand(&ins[0].shape())?)],
        Op::Expand => {
            let src = ins[0].shape();
            let dst = out.shape();
            let axes: Vec<usize> = (0..src.len()).filter(|&i| src[i] == 1 && dst[i] != 1).collect();
            vec![Some(g.sum_keep(&axes)?)]
        }
        Op::Reshape => vec![Some(g.reshape(&ins[0].shape())?)],
        Op::MatMul => vec![
            if want(0) { Some(g.matmul(ins[1].transpose()?)?) } else { None },
            if want(1) { Some(ins[0].transpose()?.matmul(g)?) } else { None },
        ],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Conv2d(geom) => {
            let xs = ins[0].shape();
            let ws = ins[1].shape();
            vec![
                if want(0) {
                    Some(g.conv2d_input_grad(ins[1], *geom, (xs[2], xs[3]))?)
                } else {
                    None
                },
                if want(1) {
                    Some(ins[0].conv2d_weight_grad(g, *geom, (ws[2], ws[3]))?)
                } else {
                    None
                },
            ]
        }
        Op::Conv2dInputGrad(geom) => {
            // out = T(gy, w): adjoint in gy is conv(g, w), in w is weight_grad(g, gy)
            let ws = ins[1].shape();
            vec![
                if want(0) { Some(g.conv2d(ins[1], *geom)?) } else { None },
                if want(1) {
                    Some(g.conv2d_weight_grad(ins[0], *geom, (ws[2], ws[3]))?)
                } else {
                    None
                },
            ]
        }
        Op::Conv2dWeightGrad(geom) => {
            // out = WG(x, gy): adjoint in x is T(gy, g), in gy is conv(x, g)
            let xs = ins[0].shape();
            vec![
                if want(0) {
                    Some(ins[1].conv2d_input_grad(g, *geom, (xs[2], xs[3]))?)
                } else {
                    None
                },
                if want(1) { Some(ins[0].conv2d(g, *geom)?) } else { None },
            ]
        }
        Op::AvgPool(k) => {
            let xs = ins[0].shape();
            vec![Some(g.avg_pool_back(*k, (xs[2], xs[3]))?)]
        }
        Op::AvgPoolBack(k) => vec![Some(g.avg_pool(*k)?)],
        Op::Gather(idx) => vec![Some(g.scatter(idx.clone(), &ins[0].shape())?)],
        Op::Scatter(idx) => vec![Some(g.gather(idx.clone(), &ins[0].shape())?)],
        Op::Slice { axis, start } => {
            let full = ins[0].shape()[*axis];
            let len = out.shape()[*axis];
            vec![Some(g.pad(*axis, *start, full - start - len)?)]
        }
        Op::Pad { axis, before } => {
            let len = ins[0].shape()[*axis];
            vec![Some(g.slice(*axis, *before, len)?)]
        }
        Op::Concat(axis) => {
            let mut offset = 0;
            let mut res = Vec::with_capacity(ins.len());
            for (i, v) in ins.iter().enumerate() {
                let len = v.shape()[*axis];
                res.push(if want(i) { Some(g.slice(*axis, offset, len)?) } else { None });
                offset += len;
            }
            res
        }
    })
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.tensor())
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let v = self.value().map(f);
        Ok(self.graph.record(v, op, &[self]))
    }

    fn same_shape(self, other: Var<'g>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let v = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.graph.record(v, op, &[self, other]))
    }

    /// Brings two operands to a common shape. Allowed: equal shapes, a
    /// one-element operand, or one shape being a trailing suffix of the other.
    fn broadcast_pair(self, other: Var<'g>, name: &'static str) -> Result<(Var<'g>, Var<'g>)> {
        let a = self.shape();
        let b = other.shape();
        if a == b {
            return Ok((self, other));
        }
        if numel(&b) == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == b[..]) {
            return Ok((self, other.broadcast_to(&a)?));
        }
        if numel(&a) == 1 || (a.len() <= b.len() && b[b.len() - a.len()..] == a[..]) {
            return Ok((self.broadcast_to(&b)?, other));
        }
        Err(Error::shape(name, &a, &b))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        a.same_shape(b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        a.same_shape(b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        a.same_shape(b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.broadcast_pair(other, "div")?;
        a.same_shape(b, Op::Div, "div", |x, y| x / y)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn max_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::MaxScalar(c), move |x| if x > c { x } else { c })
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.max_scalar(0.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::AddScalar, move |x| x + c)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::MulScalar(c), move |x| x * c)
    }

    /// Sums over `axes`, keeping them as size-one dimensions.
    pub fn sum_keep(self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::invalid("sum", format!("axis {bad} out of range for {shape:?}")));
        }
        let v = tensor::sum_keep(&self.value(), axes);
        Ok(self.graph.record(v, Op::SumKeep, &[self]))
    }

    /// Sums over `axes` and drops them.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'g>> {
        let kept = self.sum_keep(axes)?;
        let shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        kept.reshape(&shape)
    }

    pub fn mean_keep(self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        self.sum_keep(axes)?.mul_scalar(1.0 / count as f64)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes)?.mul_scalar(1.0 / count as f64)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(self) -> Result<Var<'g>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes)
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = numel(&self.shape());
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    /// Euclidean norm of all elements. A tiny floor keeps the derivative
    /// finite at the origin, where it evaluates to zero.
    pub fn norm(self) -> Result<Var<'g>> {
        self.square()?.sum()?.add_scalar(NORM_FLOOR)?.sqrt()
    }

    pub fn expand(self, target: &[usize]) -> Result<Var<'g>> {
        if self.shape() == target {
            return Ok(self);
        }
        let v = tensor::expand(&self.value(), target)?;
        Ok(self.graph.record(v, Op::Expand, &[self]))
    }

    /// Broadcasts a one-element tensor, or a tensor whose shape is a trailing
    /// suffix of `target`, up to `target`.
    pub fn broadcast_to(self, target: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape == target {
            return Ok(self);
        }
        let aligned = if numel(&shape) == 1 {
            vec![1; target.len()]
        } else if shape.len() <= target.len() && target[target.len() - shape.len()..] == shape[..] {
            let mut s = vec![1; target.len() - shape.len()];
            s.extend_from_slice(&shape);
            s
        } else {
            return Err(Error::shape("broadcast", &shape, target));
        };
        self.reshape(&aligned)?.expand(target)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let v = self.value().reshape(shape)?;
        Ok(self.graph.record(v, Op::Reshape, &[self]))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(&[shape[0], rest])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.graph.record(v, Op::MatMul, &[self, other]))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let v = tensor::transpose(&self.value())?;
        Ok(self.graph.record(v, Op::Transpose, &[self]))
    }

    /// 2-D cross-correlation of `[K, Ci, H, W]` input with a
    /// `[Co, Ci, kh, kw]` kernel.
    pub fn conv2d(self, weight: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        let v = tensor::conv2d(&self.value(), &weight.value(), geom)?;
        Ok(self.graph.record(v, Op::Conv2d(geom), &[self, weight]))
    }

    pub(crate) fn conv2d_input_grad(self, weight: Var<'g>, geom: ConvGeom, in_hw: (usize, usize)) -> Result<Var<'g>> {
        let v = tensor::conv2d_input_grad(&self.value(), &weight.value(), geom, in_hw)?;
        Ok(self.graph.record(v, Op::Conv2dInputGrad(geom), &[self, weight]))
    }

    pub(crate) fn conv2d_weight_grad(self, g: Var<'g>, geom: ConvGeom, kernel: (usize, usize)) -> Result<Var<'g>> {
        let v = tensor::conv2d_weight_grad(&self.value(), &g.value(), geom, kernel)?;
        Ok(self.graph.record(v, Op::Conv2dWeightGrad(geom), &[self, g]))
    }

    pub fn avg_pool(self, k: usize) -> Result<Var<'g>> {
        let v = tensor::avg_pool(&self.value(), k)?;
        Ok(self.graph.record(v, Op::AvgPool(k), &[self]))
    }

    fn avg_pool_back(self, k: usize, in_hw: (usize, usize)) -> Result<Var<'g>> {
        let v = tensor::avg_pool_back(&self.value(), k, in_hw)?;
        Ok(self.graph.record(v, Op::AvgPoolBack(k), &[self]))
    }

    /// Non-overlapping max pooling; the gradient goes to the first maximal
    /// element of each window.
    pub fn max_pool(self, k: usize) -> Result<Var<'g>> {
        let (idx, shape) = tensor::max_pool_indices(&self.value(), k)?;
        self.gather(Rc::new(idx), &shape)
    }

    fn gather(self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'g>> {
        let v = tensor::gather(&self.value(), &idx, out_shape)?;
        Ok(self.graph.record(v, Op::Gather(idx), &[self]))
    }

    fn scatter(self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'g>> {
        let v = tensor::scatter(&self.value(), &idx, out_shape);
        Ok(self.graph.record(v, Op::Scatter(idx), &[self]))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = tensor::slice(&self.value(), axis, start, len)?;
        Ok(self.graph.record(v, Op::Slice { axis, start }, &[self]))
    }

    pub fn pad(self, axis: usize, before: usize, after: usize) -> Result<Var<'g>> {
        let v = tensor::pad(&self.value(), axis, before, after)?;
        Ok(self.graph.record(v, Op::Pad { axis, before }, &[self]))
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat(&refs, axis)?;
        Ok(first.graph.record(v, Op::Concat(axis), parts))
    }

    /// `x * scale[c] + shift[c]` for `x` of shape `[K, C, ...]` and
    /// per-channel vectors of length `C`.
    pub fn channel_affine(self, scale: Var<'g>, shift: Var<'g>) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 || scale.shape() != [shape[1]] || shift.shape() != [shape[1]] {
            return Err(Error::shape("channel_affine", &shape, &scale.shape()));
        }
        let mut per_channel = vec![1; shape.len()];
        per_channel[1] = shape[1];
        let s = scale.reshape(&per_channel)?.expand(&shape)?;
        let b = shift.reshape(&per_channel)?.expand(&shape)?;
        self.mul(s)?.add(b)
    }
}

pub const NORM_FLOOR: f64 = 1e-30;

/// Central finite-difference estimate of the gradient of `f` at `x`.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(Error::invalid("finite_difference_gradient", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}
