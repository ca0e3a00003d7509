//! Tensor-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations on dense `f64` tensors as they are
//! evaluated. [`Tape::backward`] then sweeps the tape once in reverse id
//! order and returns the adjoint of every node that depends on a leaf.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Non-differentiable points follow fixed conventions: `max` routes the
//! adjoint to the first maximal element in scan order, and `clamp` passes
//! the adjoint only strictly inside its interval.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{ConvGeometry, SamplePlan};
pub use tape::{logistic, Gradients, Node, Op, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}
