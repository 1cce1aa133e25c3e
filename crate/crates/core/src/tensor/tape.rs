//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation on a [`Tensor`] that has a tape handle
//! appends a node to that [`Tape`]. Nodes only reference earlier nodes, so a
//! single reverse sweep over the node list visits each node once, in
//! topological order. Tensors without a handle are constants: operations on
//! constants only compute values.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::{self, Array};
use super::math;
use crate::error::{Error, Result};

#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

struct Node {
    op: Op,
    inputs: [Option<usize>; 2],
}

enum Op {
    Leaf,
    Add { a: Vec<usize>, b: Vec<usize> },
    Sub { a: Vec<usize>, b: Vec<usize> },
    Mul { a: Rc<Array>, b: Rc<Array> },
    Div { a: Rc<Array>, b: Rc<Array> },
    LogAddExp { a: Rc<Array>, b: Rc<Array>, out: Rc<Array> },
    Neg,
    Exp { out: Rc<Array> },
    Log { a: Rc<Array> },
    Sigmoid { out: Rc<Array> },
    Tanh { out: Rc<Array> },
    Softplus { a: Rc<Array> },
    Square { a: Rc<Array> },
    Sqrt { out: Rc<Array> },
    Clamp { a: Rc<Array>, lo: f64, hi: f64 },
    MatMul { a: Rc<Array>, b: Rc<Array> },
    Sum { input: Vec<usize>, kept: Vec<usize>, scale: f64 },
    LogSumExp { a: Rc<Array>, out_kept: Array },
    Max { a: Rc<Array>, out_kept: Array, axes: Vec<usize> },
    Reshape { input: Vec<usize> },
    TransposeLast,
    TakeLast { idx: Rc<Array>, logits: Vec<usize> },
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

    /// A differentiable input on this tape.
    pub fn leaf(&self, value: Array) -> Tensor {
        let id = self.push(Op::Leaf, [None, None]);
        Tensor { value: Rc::new(value), node: Some(NodeRef { tape: self.clone(), id }) }
    }

    fn push(&self, op: Op, inputs: [Option<usize>; 2]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs });
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A value that may participate in a recorded computation.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "Tensor(node {}, {:?})", n.id, self.value),
            None => write!(f, "Tensor(const, {:?})", self.value),
        }
    }
}

impl From<Array> for Tensor {
    fn from(a: Array) -> Self {
        Tensor::constant(a)
    }
}

impl Tensor {
    pub fn constant(value: Array) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    /// Whether gradients can flow into this tensor from a cost built on it.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same value, cut off from the tape: contributes no gradient to its ancestors.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor { value: self.value.clone(), node: None }
    }

    fn record(value: Array, op: Op, inputs: [Option<&Tensor>; 2]) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs.iter().flatten() {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(existing) if !existing.same(&n.tape) => {
                        return Err(Error::Contract(
                            "operands are recorded on different tapes".into(),
                        ))
                    }
                    Some(_) => {}
                }
            }
        }
        let value = Rc::new(value);
        let Some(tape) = tape else {
            return Ok(Tensor { value, node: None });
        };
        let ids = [
            inputs[0].and_then(|t| t.node.as_ref().map(|n| n.id)),
            inputs[1].and_then(|t| t.node.as_ref().map(|n| n.id)),
        ];
        let id = tape.push(op, ids);
        Ok(Tensor { value, node: Some(NodeRef { tape: tape.clone(), id }) })
    }

    fn unary(&self, value: Array, op: Op) -> Tensor {
        Self::record(value, op, [Some(self), None]).expect("single tape")
    }

    // -- binary ------------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.add(&other.value)?;
        let op = Op::Add { a: self.shape().to_vec(), b: other.shape().to_vec() };
        Self::record(v, op, [Some(self), Some(other)])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.sub(&other.value)?;
        let op = Op::Sub { a: self.shape().to_vec(), b: other.shape().to_vec() };
        Self::record(v, op, [Some(self), Some(other)])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.mul(&other.value)?;
        let op = Op::Mul { a: self.value.clone(), b: other.value.clone() };
        Self::record(v, op, [Some(self), Some(other)])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.div(&other.value)?;
        let op = Op::Div { a: self.value.clone(), b: other.value.clone() };
        Self::record(v, op, [Some(self), Some(other)])
    }

    /// `ln(e^a + e^b)`, elementwise with broadcasting.
    pub fn logaddexp(&self, other: &Tensor) -> Result<Tensor> {
        let v = Rc::new(self.value.zip_with(&other.value, math::logaddexp)?);
        let op = Op::LogAddExp { a: self.value.clone(), b: other.value.clone(), out: v.clone() };
        Self::record((*v).clone(), op, [Some(self), Some(other)])
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c)).expect("scalar broadcasts")
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c)).expect("scalar broadcasts")
    }

    // -- unary -------------------------------------------------------------

    pub fn neg(&self) -> Tensor {
        self.unary(self.value.map(|x| -x), Op::Neg)
    }

    pub fn exp(&self) -> Tensor {
        let out = Rc::new(self.value.map(f64::exp));
        self.unary((*out).clone(), Op::Exp { out })
    }

    /// Natural log. Zero maps to `-inf`; negative inputs are a domain error.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.value.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("log of negative value {bad}")));
        }
        Ok(self.unary(self.value.map(f64::ln), Op::Log { a: self.value.clone() }))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = Rc::new(self.value.map(math::sigmoid));
        self.unary((*out).clone(), Op::Sigmoid { out })
    }

    pub fn tanh(&self) -> Tensor {
        let out = Rc::new(self.value.map(f64::tanh));
        self.unary((*out).clone(), Op::Tanh { out })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(self.value.map(math::softplus), Op::Softplus { a: self.value.clone() })
    }

    pub fn square(&self) -> Tensor {
        self.unary(self.value.map(|x| x * x), Op::Square { a: self.value.clone() })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(bad) = self.value.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let out = Rc::new(self.value.map(f64::sqrt));
        Ok(self.unary((*out).clone(), Op::Sqrt { out }))
    }

    /// Clips into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let v = self.value.map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { a: self.value.clone(), lo, hi })
    }

    // -- structural ----------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.matmul(&other.value)?;
        let op = Op::MatMul { a: self.value.clone(), b: other.value.clone() };
        Self::record(v, op, [Some(self), Some(other)])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let v = self.value.reshape(shape)?;
        Ok(self.unary(v, Op::Reshape { input: self.shape().to_vec() }))
    }

    /// Inserts a unit axis at `axis`.
    pub fn expand_dims(&self, axis: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(Error::Shape(format!(
                "expand_dims axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(shape)
    }

    pub fn transpose_last(&self) -> Result<Tensor> {
        let v = self.value.transpose_last()?;
        Ok(self.unary(v, Op::TransposeLast))
    }

    /// `self[..., idx]` along the last axis, with `idx` holding class indices.
    pub fn take_last(&self, idx: &Array) -> Result<Tensor> {
        let v = array::take_last(&self.value, idx)?;
        let op = Op::TakeLast { idx: Rc::new(idx.clone()), logits: self.shape().to_vec() };
        Ok(self.unary(v, op))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let v = self.value.sum_axes(axes, keep_dims)?;
        let kept = self.value.reduced_shape(axes)?;
        Ok(self.unary(v, Op::Sum { input: self.shape().to_vec(), kept, scale: 1.0 }))
    }

    pub fn mean(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let count = self.value.reduced_count(axes)?;
        let v = self.value.mean_axes(axes, keep_dims)?;
        let kept = self.value.reduced_shape(axes)?;
        let op = Op::Sum { input: self.shape().to_vec(), kept, scale: 1.0 / count as f64 };
        Ok(self.unary(v, op))
    }

    pub fn logsumexp(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let out_kept = self.value.logsumexp_axes(axes, true)?;
        let mut v = out_kept.clone();
        if !keep_dims {
            v = v.reshape(array::squeeze_axes(out_kept.shape(), axes))?;
        }
        Ok(self.unary(v, Op::LogSumExp { a: self.value.clone(), out_kept }))
    }

    pub fn max(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let out_kept = self.value.max_axes(axes, true)?;
        let mut v = out_kept.clone();
        if !keep_dims {
            v = v.reshape(array::squeeze_axes(out_kept.shape(), axes))?;
        }
        let op = Op::Max { a: self.value.clone(), out_kept, axes: axes.to_vec() };
        Ok(self.unary(v, op))
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum(&axes, false).expect("all axes valid")
    }

    pub fn mean_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.mean(&axes, false).expect("all axes valid")
    }

    /// Sums the trailing `n` axes.
    pub fn sum_trailing(&self, n: usize) -> Result<Tensor> {
        if n > self.rank() {
            return Err(Error::Shape(format!(
                "cannot reduce {n} trailing axes of shape {:?}",
                self.shape()
            )));
        }
        if n == 0 {
            return Ok(self.clone());
        }
        let axes: Vec<usize> = (self.rank() - n..self.rank()).collect();
        self.sum(&axes, false)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from this scalar. Constants yield all-zero gradients.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradients need a scalar cost, got shape {:?}",
                self.shape()
            )));
        }
        let Some(root) = &self.node else {
            return Ok(Gradients { grads: Vec::new(), tape: None });
        };
        let nodes = root.tape.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; root.id + 1];
        grads[root.id] = Some(Array::full(self.shape().to_vec(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let [ga, gb] = backward_rule(&node.op, &g)?;
            if let (Some(i), Some(ga)) = (node.inputs[0], ga) {
                accumulate(&mut grads[i], ga)?;
            }
            if let (Some(i), Some(gb)) = (node.inputs[1], gb) {
                accumulate(&mut grads[i], gb)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, tape: Some(root.tape.clone()) })
    }
}

fn accumulate(slot: &mut Option<Array>, g: Array) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backward_rule(op: &Op, g: &Array) -> Result<[Option<Array>; 2]> {
    Ok(match op {
        Op::Leaf => [None, None],
        Op::Add { a, b } => [Some(g.sum_to_shape(a)?), Some(g.sum_to_shape(b)?)],
        Op::Sub { a, b } => [Some(g.sum_to_shape(a)?), Some(g.sum_to_shape(b)?.scale(-1.0))],
        Op::Mul { a, b } => [
            Some(g.mul(b)?.sum_to_shape(a.shape())?),
            Some(g.mul(a)?.sum_to_shape(b.shape())?),
        ],
        Op::Div { a, b } => {
            let ga = g.div(b)?.sum_to_shape(a.shape())?;
            let q = a.div(&b.map(|x| x * x))?;
            let gb = g.mul(&q)?.scale(-1.0).sum_to_shape(b.shape())?;
            [Some(ga), Some(gb)]
        }
        Op::LogAddExp { a, b, out } => {
            let wa = a.zip_with(out, |x, o| if o == f64::NEG_INFINITY { 0.5 } else { (x - o).exp() })?;
            let wb = b.zip_with(out, |x, o| if o == f64::NEG_INFINITY { 0.5 } else { (x - o).exp() })?;
            [
                Some(g.mul(&wa)?.sum_to_shape(a.shape())?),
                Some(g.mul(&wb)?.sum_to_shape(b.shape())?),
            ]
        }
        Op::Neg => [Some(g.scale(-1.0)), None],
        Op::Exp { out } => [Some(g.mul(out)?), None],
        Op::Log { a } => [Some(g.div(a)?), None],
        Op::Sigmoid { out } => [Some(g.mul(&out.map(|s| s * (1.0 - s)))?), None],
        Op::Tanh { out } => [Some(g.mul(&out.map(|t| 1.0 - t * t))?), None],
        Op::Softplus { a } => [Some(g.mul(&a.map(math::sigmoid))?), None],
        Op::Square { a } => [Some(g.mul(&a.scale(2.0))?), None],
        Op::Sqrt { out } => [Some(g.div(&out.scale(2.0))?), None],
        Op::Clamp { a, lo, hi } => {
            let mask = a.map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
            [Some(g.mul(&mask)?), None]
        }
        Op::MatMul { a, b } => {
            let ga = g.matmul(&b.transpose_last()?)?.sum_to_shape(a.shape())?;
            let gb = a.transpose_last()?.matmul(g)?.sum_to_shape(b.shape())?;
            [Some(ga), Some(gb)]
        }
        Op::Sum { input, kept, scale } => {
            let gk = g.reshape(kept.clone())?.broadcast_to(input)?;
            [Some(if *scale == 1.0 { gk } else { gk.scale(*scale) }), None]
        }
        Op::LogSumExp { a, out_kept } => {
            let gk = g.reshape(out_kept.shape().to_vec())?;
            let w = a.zip_with(out_kept, |x, o| if o == f64::NEG_INFINITY { 0.0 } else { (x - o).exp() })?;
            [Some(w.mul(&gk)?), None]
        }
        Op::Max { a, out_kept, axes } => {
            let mask = a.zip_with(out_kept, |x, m| if x == m { 1.0 } else { 0.0 })?;
            let count = mask.sum_axes(axes, true)?;
            let gk = g.reshape(out_kept.shape().to_vec())?.div(&count)?;
            [Some(mask.mul(&gk)?), None]
        }
        Op::Reshape { input } => [Some(g.reshape(input.clone())?), None],
        Op::TransposeLast => [Some(g.transpose_last()?), None],
        Op::TakeLast { idx, logits } => [Some(array::take_last_backward(g, idx, logits)), None],
    })
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    tape: Option<Tape>,
}

impl Gradients {
    /// Gradient with respect to `t`; zeros when `t` does not reach the cost.
    pub fn wrt(&self, t: &Tensor) -> Array {
        let hit = match (&t.node, &self.tape) {
            (Some(n), Some(tape)) if n.tape.same(tape) => {
                self.grads.get(n.id).and_then(|g| g.as_ref())
            }
            _ => None,
        };
        hit.cloned().unwrap_or_else(|| Array::zeros(t.shape().to_vec()))
    }
}

/// One gradient per requested tensor, shape-matched.
pub fn gradients(cost: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Array>> {
    let g = cost.backward()?;
    Ok(wrt.iter().map(|t| g.wrt(t)).collect())
}
