//! Matrix kernels, the gradient tape, Adam, and finite-difference checks.

mod adam;
mod gradcheck;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use matrix::{argmax, dot, log_sum_exp, Matrix};
pub use tape::{cross_entropy, cross_entropy_mean, Activation, Gradients, Tape, Var};
