//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Every op runs single-threaded in a fixed order, so two runs with the same
//! inputs produce bitwise-identical values and gradients.

mod ops;
mod optim;
mod real;
mod tape;
mod tensor;

pub use ops::{gaussian_bin_mass, BatchStats};
pub use optim::Adam;
pub use real::{gemm, normal_cdf, normal_pdf, Real};
pub use tape::{GradSink, Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
