//! Dense linear algebra and the hand-differentiated network core.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;
pub mod rng;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::Matrix;
pub use mlp::{Activation, ForwardCache, MlpSpec, ParamSet};
pub use optim::{
    adam_step, restore_optimizer, sgd_step, Adam, Direction, Optimizer, OptimizerFactory,
    OptimizerKind, OptimizerRegistry, OptimizerSettings, OptimizerState, Sgd,
};
pub use rng::{dropout_mask, gaussian_sample, streams, Rng};
