//! Dense row-major tensors with a reverse-mode tape.
//!
//! Only the operations the decoder needs are provided. Every tape operation
//! works on rank-2 tensors with explicit shapes; there is no implicit
//! broadcasting. Row vectors are `[1, n]` and scalars are `[1, 1]`.

mod checkpoint;
mod gradcheck;
mod kernels;
mod tape;

pub use kernels::log_softmax;
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, ParamCheck};
pub use tape::{CustomOp, Gradients, NodeId, ParamId, ParamStore, Tape};

use thiserror::Error;

/// Floating point type used throughout the crate.
pub type Real = f64;

/// Additive mask value applied to attention scores of excluded positions.
pub const MASK_VALUE: Real = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("index {index} out of range {bound} at node {node} ({op})")]
    IndexOutOfRange {
        node: usize,
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: Real) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// A `[rows, cols]` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<Real>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, r: usize) -> &[Real] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> Real {
        self.data[0]
    }
}
