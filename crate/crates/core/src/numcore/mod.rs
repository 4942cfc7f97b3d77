//! Dense arithmetic, seeded randomness and reverse-mode differentiation.

mod rng;
mod tape;
mod tensor;

pub use rng::RngState;
pub use tape::{sigmoid, silu, silu_grad, ParamTape, Var};
pub use tensor::{backward_substitute, cholesky, forward_substitute, Tensor};
pub(crate) use tensor::{gemm, MatRef};
