//! Convolutional photo enhancement engine: tensors, reverse-mode autodiff,
//! generator/discriminator models, losses, quality metrics, data loading,
//! adversarial training and efficiency benchmarking.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Rng, Shape, Tensor};
