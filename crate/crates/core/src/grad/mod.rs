//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records the forward pass as a flat list of nodes in execution
//! order. Three passes read it back:
//!
//! * [`Tape::backward`] with [`BackwardMode::Standard`] computes exact
//!   reverse-mode gradients of a scalar node with respect to every leaf.
//! * [`Tape::backward`] with [`BackwardMode::Guided`] is identical except at
//!   rectifier nodes, where the propagated gradient is zeroed wherever the
//!   rectifier input was nonpositive or the incoming gradient is nonpositive.
//! * [`Tape::relevance`] propagates relevance from a scalar logit back to the
//!   leaves with the epsilon rule.
//!
//! [`finite_difference`] is an independent central-difference oracle used by
//! the test suites to cross-check the backward pass.

mod fd;
mod tape;

pub use fd::finite_difference;
pub use tape::{GradMap, NodeId, Tape};

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors raised by tape construction and the backward passes.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward target node {0} is not scalar-valued")]
    NotScalar(usize),
    #[error("tape is empty")]
    EmptyTape,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("relevance propagation does not support {0} nodes")]
    UnsupportedRelevance(&'static str),
    #[error("node id {0} out of range")]
    BadNode(usize),
}

/// Gradient selection for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Exact reverse-mode gradients.
    Standard,
    /// Guided backpropagation: at each rectifier, keep the gradient only
    /// where both the rectifier input and the incoming gradient are positive.
    Guided,
}

/// Dense tensor with an optional gradient buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor, checking that `values` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, GradError> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(GradError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} wants {expect} values, got {}", values.len()),
            });
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: vec![S::zero(); n], grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], values: vec![v], grad: None }
    }

    pub fn vector(values: Vec<S>) -> Self {
        Tensor { shape: vec![values.len()], values, grad: None }
    }

    /// Row-major matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<S>) -> Result<Self, GradError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// First (only) element of a scalar tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> S {
        self.values[r * self.shape[1] + c]
    }

    /// Gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.values.len());
        let buf = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.values.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b = *b + *v;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Fill with uniform draws from `(lo, hi)`.
    pub fn fill_uniform(&mut self, rng: &mut crate::rng::Rng, lo: f64, hi: f64) {
        for v in &mut self.values {
            *v = S::from_f64(rng.range(lo, hi));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_mismatched_values() {
        let r = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(GradError::ShapeMismatch { .. })));
    }

    #[test]
    fn grad_accumulates_in_place() {
        let mut t = Tensor::vector(vec![1.0_f64, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, 0.0]);
        assert_eq!(t.grad().unwrap(), &[1.5, 0.5]);
    }
}
