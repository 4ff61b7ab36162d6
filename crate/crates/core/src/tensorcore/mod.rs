//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Values are immutable once created. Gradients are computed by recording
//! every op on a single-owner [`Tape`] and replaying it in reverse. A
//! separate tape-free inference path (see [`infer`]) serves batched forward
//! passes in either 32- or 64-bit precision.

mod adamw;
pub mod gradcheck;
pub mod infer;
mod tape;


pub use adamw::AdamW;
pub use tape::{tape_alloc_count, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// A plain dense value: row-major 64-bit floats plus a shape.
///
/// Autodiff state (requires-grad flag, gradient buffer) lives on the tape,
/// not on the value; a `Tensor` outside a tape is just data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal the product of the shape"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A named weight tensor; the unit the optimizer and serializers operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value }
    }

    /// Round every entry to the nearest f32-representable value, so that a
    /// 32-bit serialization round-trip is bit-exact.
    pub fn quantize_f32(&mut self) {
        for x in &mut self.value.data {
            *x = *x as f32 as f64;
        }
    }
}
