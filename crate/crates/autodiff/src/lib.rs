//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Forward operations are recorded on a [`Tape`]; [`Tape::backward`] replays
//! them in reverse. Contractions are written as two-operand Einstein
//! summations and lowered to batched matrix products.

pub mod checkpoint;
pub mod einsum;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::TensorFile;
pub use einsum::{contract, ContractSpec};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
