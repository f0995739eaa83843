//! Differentiable neural operators. Elementwise maps and reductions are
//! methods on [`Var`](crate::autodiff::Var); the layer-shaped operators are
//! free functions here.

pub mod blur;
pub mod color;
pub mod conv;
mod elementwise;
pub mod norm;
pub mod pool;

pub use blur::{gaussian_blur, GaussianKernel, SigmaMode};
pub use color::grayscale;
pub use conv::{conv2d, conv2d_transpose, Conv2dSpec, ConvTranspose2dSpec};
pub use norm::{batch_norm, BatchStats, NormMode};
pub use pool::max_pool2x2;
