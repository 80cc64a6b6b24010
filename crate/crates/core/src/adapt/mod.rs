//! Style and scale adaptation: masked AdaIN and attention-derived shape
//! guidance.

mod adain;
mod shape;

pub use adain::{masked_adain, masked_adain_vjp, masked_stats, ChannelStats, STD_FLOOR};
pub use shape::{
    aggregate_shape, extract_shape, extract_shape_vjp, shape_energy, ShapeConfig, ShapeEnergy,
    ShapeField, ShapeMode,
};
