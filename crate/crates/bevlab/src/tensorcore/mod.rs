//! Minimal dense-tensor engine with reverse-mode differentiation.

pub mod checkpoint;
pub mod fdcheck;
pub mod msa;
pub mod param;
pub mod tape;
pub mod tensor;

pub use param::{Adam, Parameter};
pub use tape::{InterpMethod, MemCounter, PoolMode, SharedMemCounter, Tape, Var};
pub use tensor::Tensor;
