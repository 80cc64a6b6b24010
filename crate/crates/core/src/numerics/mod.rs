//! Dense tensor substrate shared by every other module.

pub mod io;
mod ops;
mod rng;
mod tensor;

pub use ops::{conv2d, gaussian_kernel, resize_bilinear, resize_bilinear_adjoint, softmax_rows, Padding};
pub use rng::SeededRng;
pub use tensor::Tensor;
