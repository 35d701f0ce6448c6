//! Tensor arithmetic, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPSILON};
pub use graph::{Gradients, Graph, Var, NORM_GUARD};
pub use tensor::Tensor;

use crate::error::Result;

/// `x · w + b` over the last axis of `x`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}
