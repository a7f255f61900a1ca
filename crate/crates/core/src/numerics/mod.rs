//! Minimal tensor library with define-by-run reverse-mode differentiation.
//!
//! Every model computation in the crate runs through [`Tape`]: a forward op
//! appends a node holding its output value, and [`Tape::backward`] walks the
//! nodes in reverse to produce [`Gradients`]. Element type is generic over
//! [`Real`] so the same op code can be instantiated in `f64` for finite
//! difference checks while training runs in `f32`.

mod container;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use container::{decode_container, encode_container, read_container, write_container, Container, ContainerError, CONTAINER_VERSION};
pub use kernels::Real;
pub use params::{Init, Initializer, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::softmax_in_place;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
