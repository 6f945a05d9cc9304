//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! The engine is deliberately small: a [`Tape`] records the operations a
//! model needs (matrix products, softmax, batch normalization, slicing and
//! concatenation), [`ParamStore`] owns named trainable tensors, and [`Adam`]
//! updates them. Checkpoints use a simple self-describing binary layout, see
//! [`checkpoint`].

pub mod checkpoint;
mod error;
mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
