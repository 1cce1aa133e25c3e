//! Dense tensors with recorded-tape reverse-mode gradients.

mod array;
pub mod math;
mod optim;
mod tape;

pub use array::{broadcast_shapes, Array};
pub(crate) use array::lanes;
pub use optim::{Adam, Parameter};
pub use tape::{gradients, Gradients, Tape, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Square,
    Sqrt,
}

impl Elementwise {
    pub const ALL: [Elementwise; 12] = [
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Div,
        Self::Neg,
        Self::Exp,
        Self::Log,
        Self::Sigmoid,
        Self::Tanh,
        Self::Softplus,
        Self::Square,
        Self::Sqrt,
    ];

    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Applies an elementwise primitive; binary kinds require `b`.
pub fn elementwise(kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let rhs = || {
        b.ok_or_else(|| Error::Contract(format!("{kind:?} needs a second operand")))
    };
    match kind {
        Elementwise::Add => a.add(rhs()?),
        Elementwise::Sub => a.sub(rhs()?),
        Elementwise::Mul => a.mul(rhs()?),
        Elementwise::Div => a.div(rhs()?),
        Elementwise::Neg => Ok(a.neg()),
        Elementwise::Exp => Ok(a.exp()),
        Elementwise::Log => a.log(),
        Elementwise::Sigmoid => Ok(a.sigmoid()),
        Elementwise::Tanh => Ok(a.tanh()),
        Elementwise::Softplus => Ok(a.softplus()),
        Elementwise::Square => Ok(a.square()),
        Elementwise::Sqrt => a.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    LogSumExp,
    Max,
}

pub fn reduce(kind: Reduction, a: &Tensor, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
    match kind {
        Reduction::Sum => a.sum(axes, keep_dims),
        Reduction::Mean => a.mean(axes, keep_dims),
        Reduction::LogSumExp => a.logsumexp(axes, keep_dims),
        Reduction::Max => a.max(axes, keep_dims),
    }
}
