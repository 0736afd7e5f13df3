//! Differentiable dense-tensor substrate: forward primitives, reverse-mode
//! gradient accumulation and a finite-difference verification harness.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{init_ones, init_weight, init_zeros, ParamId, ParamStore};
pub use tape::{GradAccum, NodeId, Tape};
pub use tensor::Tensor;
