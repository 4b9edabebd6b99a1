//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation on a [`Var`] is evaluated eagerly and appended to its
//! [`Tape`]. Node order is the evaluation order and therefore a topological
//! order; [`Tape::backward`] walks it in reverse exactly once and consumes
//! the tape.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{AefError, Result};
use crate::kernels;
use crate::tensor::{sum_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    Concat { parts: Vec<NodeId>, axis: usize },
    SumAxes(NodeId, Vec<usize>),
    Softmax(NodeId, usize),
    L2Norm(NodeId, Vec<usize>),
    Reshape(NodeId),
    Transpose(NodeId),
    AvgPool2(NodeId),
    Upsample2(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(NodeId, Tensor)>,
    shapes: Vec<(NodeId, Vec<usize>)>,
}

impl Gradients {
    /// d(loss)/d(leaf); a zero tensor when the leaf was disconnected from the loss.
    pub fn wrt(&self, leaf: Var<'_>) -> Tensor {
        self.get(leaf.id).cloned().unwrap_or_else(|| {
            let shape = self
                .shapes
                .iter()
                .find(|(id, _)| *id == leaf.id)
                .map(|(_, s)| s.clone())
                .unwrap_or_else(|| leaf.shape());
            Tensor::zeros(shape)
        })
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
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
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        if self.consumed.get() {
            return Err(AefError::Tape("tape already consumed by backward".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        // ops on constants only need their value
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Constant };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Constant, false)
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    /// Concatenate along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        for p in parts {
            self.check_owner(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AefError::Tape("operand recorded on a different tape".into()))
        }
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(&loss)?;
        if self.consumed.replace(true) {
            return Err(AefError::Tape("tape already consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if root.value.numel() != 1 {
            return Err(AefError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id.0).map(|_| None).collect();
        grads[loss.id.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut leaves = Vec::new();
        let mut shapes = Vec::new();

        for i in (0..=loss.id.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                shapes.push((NodeId(i), node.value.shape().to_vec()));
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
            let mut acc = |id: NodeId, t: Tensor| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.axpy(1.0, &t).expect("gradient shape"),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => leaves.push((NodeId(i), g)),
                Op::Constant => {}
                Op::Add(a, b) => {
                    acc(*a, sum_to_shape(&g, val(*a).shape()));
                    acc(*b, sum_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, sum_to_shape(&g, val(*a).shape()));
                    acc(*b, sum_to_shape(&g.map(|v| -v), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        let t = kernels::binary("mul", &g, vb, |x, y| x * y)?;
                        acc(*a, sum_to_shape(&t, va.shape()));
                    }
                    if nodes[b.0].requires_grad {
                        let t = kernels::binary("mul", &g, va, |x, y| x * y)?;
                        acc(*b, sum_to_shape(&t, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        let t = kernels::binary("div", &g, vb, |x, y| x / y)?;
                        acc(*a, sum_to_shape(&t, va.shape()));
                    }
                    if nodes[b.0].requires_grad {
                        // d(a/b)/db = -out/b
                        let q = kernels::binary("div", &node.value, vb, |x, y| x / y)?;
                        let t = g.zip_map(&q, |x, y| -x * y)?;
                        acc(*b, sum_to_shape(&t, vb.shape()));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|v| v * s));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, Tensor::new(shape, g.into_data())?);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        acc(*a, kernels::matmul(&g, &kernels::transpose_last2(vb)?)?);
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, kernels::matmul(&kernels::transpose_last2(va)?, &g)?);
                    }
                }
                Op::Conv2d { input, weight, bias } => {
                    if nodes[input.0].requires_grad {
                        acc(*input, kernels::conv2d_grad_input(&g, val(*weight)));
                    }
                    if nodes[weight.0].requires_grad {
                        acc(*weight, kernels::conv2d_grad_weight(&g, val(*input)));
                    }
                    if let Some(b) = bias {
                        if nodes[b.0].requires_grad {
                            acc(*b, kernels::conv2d_grad_bias(&g));
                        }
                    }
                }
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y)?),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })?),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, g.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 })?);
                }
                Op::Concat { parts, axis } => {
                    let sizes: Vec<usize> = parts.iter().map(|p| val(*p).shape()[*axis]).collect();
                    for (p, part) in parts.iter().zip(kernels::split(&g, &sizes, *axis)) {
                        acc(*p, part);
                    }
                }
                Op::SumAxes(a, axes) => {
                    let va = val(*a);
                    let kept = kernels::reduced_shape(va.shape(), axes, true);
                    let g = Tensor::new(kept, g.into_data())?;
                    acc(*a, kernels::expand(&g, va.shape()));
                }
                Op::Softmax(a, axis) => acc(*a, kernels::softmax_grad(&node.value, &g, *axis)),
                Op::L2Norm(a, axes) => {
                    let va = val(*a);
                    let kept = kernels::reduced_shape(va.shape(), axes, true);
                    let norm = Tensor::new(kept.clone(), node.value.data().to_vec())?;
                    let g = Tensor::new(kept, g.into_data())?;
                    let scale = g.zip_map(&norm, |g, n| if n > 0.0 { g / n } else { 0.0 })?;
                    acc(*a, kernels::binary("l2_norm", va, &scale, |x, s| x * s)?);
                }
                Op::Transpose(a) => acc(*a, kernels::transpose_last2(&g)?),
                Op::AvgPool2(a) => acc(*a, kernels::avg_pool2_grad(&g, val(*a).shape())),
                Op::Upsample2(a) => acc(*a, kernels::upsample2_grad(&g, val(*a).shape())),
            }
        }
        Ok(Gradients { leaves, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Result<Var<'t>> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.tape.check_owner(&other)?;
        let out = kernels::binary(op_name, &self.value(), &other.value(), f)?;
        self.tape.push(out, op, self.requires_grad() || other.requires_grad())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(&other)?;
        if let Some(index) = other.value().data().iter().position(|&v| v == 0.0) {
            return Err(AefError::DivisionByZero { index });
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// 2-D matrix product, or batched product of two 3-D operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(&other)?;
        let out = kernels::matmul(&self.value(), &other.value())?;
        self.tape.push(
            out,
            Op::MatMul(self.id, other.id),
            self.requires_grad() || other.requires_grad(),
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1. Accepts N×C×H×W or C×H×W input.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.tape.check_owner(&weight)?;
        if let Some(b) = &bias {
            self.tape.check_owner(b)?;
        }
        let shape = self.shape();
        if shape.len() == 3 {
            let batched = self.reshape(&[1, shape[0], shape[1], shape[2]])?;
            let out = batched.conv2d(weight, bias)?;
            let os = out.shape();
            return out.reshape(&os[1..]);
        }
        let out = kernels::conv2d(&self.value(), &weight.value(), bias.map(|b| b.value()).as_deref())?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(
            out,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
            },
            rg,
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(self.value().map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let f = |v: f64| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        };
        self.unary(self.value().map(f), Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient passes through inside the bounds and is zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(self.value().map(|v| v.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        kernels::check_axes("sum", v.shape(), axes)?;
        self.unary(kernels::sum_axes(&v, axes, keepdim), Op::SumAxes(self.id, axes.to_vec()))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        kernels::check_axes("mean", &shape, axes)?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes, false)
    }

    /// Population variance over `axes`.
    pub fn var_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let mu = self.mean_axes(axes, true)?;
        self.sub(mu)?.square()?.mean_axes(axes, keepdim)
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        kernels::check_axes("softmax", v.shape(), &[axis])?;
        self.unary(kernels::softmax(&v, axis), Op::Softmax(self.id, axis))
    }

    /// Euclidean norm over `axes`. The gradient at a zero norm is taken as zero.
    pub fn l2_norm_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        kernels::check_axes("l2_norm", v.shape(), axes)?;
        let sq = kernels::sum_axes(&v.map(|x| x * x), axes, keepdim).map(f64::sqrt);
        self.unary(sq, Op::L2Norm(self.id, axes.to_vec()))
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.l2_norm_axes(&axes, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AefError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = v.reshape(shape.to_vec())?;
        self.unary(out, Op::Reshape(self.id))
    }

    /// Swap the last two axes of a 2-D or 3-D variable.
    pub fn transpose(self) -> Result<Var<'t>> {
        let out = kernels::transpose_last2(&self.value())?;
        self.unary(out, Op::Transpose(self.id))
    }

    /// 2×2 average pooling over the spatial axes of N×C×H×W.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let out = kernels::avg_pool2(&self.value())?;
        self.unary(out, Op::AvgPool2(self.id))
    }

    /// 2× nearest-neighbor upsampling of N×C×H×W.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let out = kernels::upsample2(&self.value())?;
        self.unary(out, Op::Upsample2(self.id))
    }
}
