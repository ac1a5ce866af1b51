//! Tensors, reverse-mode autodiff, optimizers and spectral utilities.

pub mod gemm;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod real;
mod spectral;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, check_gradients, check_gradients_at, GradCheck};
pub use ops::LAYER_NORM_EPS;
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState, MAX_TRUST_RATIO};
pub use params::{BoundParams, ParamSet};
pub use real::{DType, Real};
pub use spectral::{
    first_principal_direction, fix_sign, gram, top_right_singular_vectors, POWER_MAX_ITERATIONS, POWER_TOLERANCE,
};
pub use tape::{BackwardCtx, BackwardFn, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
