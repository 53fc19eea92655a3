//! Dense numerics shared by the rest of the crate: a small row-major matrix
//! type with the factorizations we need, multilayer perceptrons with hand
//! written backprop, an Adam optimizer over labelled parameter blocks, and a
//! central-difference gradient checker.

mod fd;
mod mat;
mod mlp;
mod optim;
pub mod vec2;

pub use fd::fd_gradient;
pub use mat::{sym_eigen_2x2, Cholesky, Mat};
pub use mlp::{Activation, Init, MlpGrads, MlpParams, MlpTape};
pub use optim::{opt_step, sgd_step, OptState};
