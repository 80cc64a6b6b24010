//! Object swapping on a small attention U-Net: DDIM inversion, targeted
//! swapping of latents and attention variables, and appearance adaptation
//! (masked AdaIN, shape guidance, mask feathering and annealing).

pub mod adapt;
pub mod denoiser;
pub mod error;
pub mod masks;
pub mod numerics;
pub mod pipeline;
pub mod scheduler;
pub mod swap;

pub use error::{Error, Result};
