//! Reverse-mode automatic differentiation on flat `f32` tensors.
//!
//! The engine is a Wengert tape rebuilt on every forward pass: values are
//! recorded as nodes, `backward` replays the tape in reverse and accumulates
//! gradients into every reachable leaf. Storage is `f32`; reductions
//! (layer-norm statistics, softmax denominators, sums, matmul inner products)
//! accumulate in `f64` so finite-difference checks stay tight.
//!
//! Alongside the tape live the pieces a small training loop needs: named
//! [`Parameter`]s with a visitor-style [`Module`] trait, decoupled-weight-decay
//! [`AdamW`], a binary checkpoint format, and a finite-difference gradient
//! checker used by the test suites.

mod error;
pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::Error;
pub use optim::AdamW;
pub use param::{Module, Parameter};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, Error>;
