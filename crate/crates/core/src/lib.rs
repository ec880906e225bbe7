//! Orientation-disentangled variational auto-encoders on SE(2,N) group
//! convolutions, with training, synthetic benchmarking and downstream
//! bag-level evaluation.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
pub mod se2;
pub mod latent;
pub mod config;
pub mod model;
pub mod data;
pub mod train;
pub mod eval;
pub mod traverse;
pub mod check;
pub mod cli;
