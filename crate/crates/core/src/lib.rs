//! One-class Bayesian CNN for separating real images from synthetic ones.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod cg;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod perturb;
pub mod preprocess;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use detector::{Detector, InferenceMode};
pub use error::{Error, Result};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
