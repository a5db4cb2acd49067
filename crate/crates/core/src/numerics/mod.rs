//! Dense tensors, the differentiation tape and the checkpoint format.

pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{inverse_softplus, sigmoid, silu, softplus, Tensor};

pub(crate) use tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
