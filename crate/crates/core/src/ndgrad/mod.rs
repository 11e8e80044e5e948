//! Dense `f64` tensors, an eager operation tape with reverse-mode
//! gradients, finite-difference checking, and seeded random streams.

mod gradcheck;
pub(crate) mod kernels;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use rng::RngStream;
pub use tape::{Axes, Gradients, NodeId, Op, Tape, BN_EPS, LOG_CLAMP};
pub use tensor::Tensor;
