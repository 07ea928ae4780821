//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations on dense `f32` tensors during the forward
//! pass; [`Tape::backward`] sweeps it in reverse. Parameters live outside the
//! tape as [`Param`]s and are re-registered as leaves on every fresh tape.

mod optim;
mod tape;
mod tensor;

pub use optim::{optimizer_step, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Param, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
}
