//! Real-valued reverse-mode autodiff, complex pairs built on top of it, and
//! the Adam optimizer.

mod complex;
mod ops;
mod params;
mod tensor;

pub use complex::ComplexPair;
pub use ops::{pivot_ratio, LEAKY_SLOPE};
pub use params::{adam_step, AdamState, ModelParams, Param, ParamBinder};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error("training aborted at parameter `{path}`: {detail}")]
    Training { path: String, detail: String },
}
