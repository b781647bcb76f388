//! Dense-tensor numerical core: f64 tensors, a reverse-mode gradient tape,
//! a GRU cell, Adam, deterministic RNG, and finite-difference checking.

pub mod adam;
pub mod gradcheck;
pub mod gru;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use gru::{gru_cell, gru_cell_from_gx, init_uniform, GruHandles, GruParams};
pub use rng::Rng;
pub use tape::{BackwardCtx, CustomOp, DiffTensor, Tape};
pub use tensor::{gemm_acc, Tensor};
