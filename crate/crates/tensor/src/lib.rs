//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layer primitives used by the comment models, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{log_softmax, Tape, Var};
pub use tensor::Tensor;
