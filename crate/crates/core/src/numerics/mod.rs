//! Dense tensors, the deterministic generator and small linear algebra.

pub mod linalg;
mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::Tensor;
