//! Numeric foundation: tensors, kernels, a gradient tape, parameters,
//! optimizers, seeded randomness and tensor files.

pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use ops::{gelu, layer_norm, matmul, softmax, LN_EPS};
pub use param::{optimizer_step, Bound, OptimizerKind, ParamSet, Parameter};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
