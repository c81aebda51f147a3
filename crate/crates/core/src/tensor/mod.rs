//! Dense 64-bit tensors and a Wengert-tape reverse-mode differentiation engine.
//!
//! Every primitive records itself on the [`Tape`] during the forward pass and
//! owns a hand-derived gradient rule replayed by [`Tape::backward`]. All
//! primitives reject non-finite outputs, so NaN/Inf surfaces at the op that
//! produced it instead of ten layers downstream.

mod gradcheck;
mod rng;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use rng::{dropout_key, unit_uniform};
pub use tape::{Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("index {index} out of range in {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("numerical failure in {op}: {details}")]
    Numerical { op: &'static str, details: String },
}

/// Dense row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named learnable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    /// Unique dotted path, e.g. `"mamba.0.w_in"`.
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Row 0 is a padding row kept at zero: no gradient, no update, no decay.
    pub pad_row_frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape.clone());
        Parameter { name: name.into(), value, grad, pad_row_frozen: false }
    }

    pub fn frozen_pad_row(name: impl Into<String>, value: Tensor) -> Self {
        let mut p = Parameter::new(name, value);
        p.pad_row_frozen = true;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Length of one row (last-axis extent); rows are what `pad_row_frozen` masks.
    pub fn row_len(&self) -> usize {
        *self.shape().last().unwrap_or(&1)
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }
}

/// Per-node gradients produced by one backward pass, indexed by [`TensorId`].
pub struct GradStore {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }
}
