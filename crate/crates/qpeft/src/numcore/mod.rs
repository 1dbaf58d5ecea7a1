//! Numeric core: dense matrices, deterministic RNG, parameter store with
//! Adam, a tape-based reverse-mode autodiff engine, and finite-difference
//! gradient checking.

pub mod gradcheck;
pub mod matrix;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::Matrix;
pub use param::{adam_step, Adam, AdamConfig, AdamState, ParamId, ParamStore, ParamTensor};
pub use rng::DetRng;
pub use scalar::Scalar;
pub use tape::{GradMap, NodeId, Tape};
