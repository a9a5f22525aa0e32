//! Dense arithmetic, seeded sampling, optimizers and finite differences.

mod gradcheck;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState};
pub use rng::{gaussian_sample, Rng, RngState};
