//! Minimal differentiable building blocks with explicit forward/backward passes.

pub mod activation;
pub mod adam;
pub mod conv;
pub(crate) mod gemm;
pub mod norm;
pub mod resample;

pub use adam::{Adam, AdamState, Parameters};
pub use conv::Conv;
pub use norm::BatchNorm;
