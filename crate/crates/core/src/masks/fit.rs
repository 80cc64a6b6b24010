use crate::denoiser::{LayerInfo, VariableClass};
use crate::error::{Error, Result};
use crate::masks::SoftMask;
use crate::numerics::{resize_bilinear, Tensor};

/// Shape of a variable a mask is fitted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariableDescriptor {
    /// `h×w` latent grid (channels are broadcast).
    Latent { h: usize, w: usize },
    /// `N×N` self-attention map of an `h×w` layer.
    SelfMap { h: usize, w: usize },
    /// `N×tokens` cross-attention map.
    CrossMap { h: usize, w: usize, tokens: usize },
    /// `N×channels` self-attention output.
    SelfOut { h: usize, w: usize, channels: usize },
}

impl VariableDescriptor {
    pub fn for_layer(class: VariableClass, layer: &LayerInfo, tokens: usize) -> Self {
        let (h, w) = (layer.h, layer.w);
        match class {
            VariableClass::SelfMap => Self::SelfMap { h, w },
            VariableClass::CrossMap => Self::CrossMap { h, w, tokens },
            VariableClass::SelfOut => Self::SelfOut {
                h,
                w,
                channels: layer.channels,
            },
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match *self {
            Self::Latent { h, w } | Self::SelfMap { h, w } | Self::CrossMap { h, w, .. } | Self::SelfOut { h, w, .. } => {
                (h, w)
            }
        }
    }

    /// Shape of the variable itself.
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            Self::Latent { h, w } => vec![h, w],
            Self::SelfMap { h, w } => vec![h * w, h * w],
            Self::CrossMap { h, w, tokens } => vec![h * w, tokens],
            Self::SelfOut { h, w, channels } => vec![h * w, channels],
        }
    }
}

/// A mask resized to a variable's grid; one weight per spatial / query
/// position, broadcast over the remaining axis.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedMask {
    descriptor: VariableDescriptor,
    weights: Tensor,
}

impl FittedMask {
    pub fn descriptor(&self) -> VariableDescriptor {
        self.descriptor
    }

    /// `h×w` weights on the variable's grid.
    pub fn grid(&self) -> &Tensor {
        &self.weights
    }

    /// Weights per position in row-major (query) order.
    pub fn weights(&self) -> &[f32] {
        self.weights.data()
    }

    pub fn mass(&self) -> f64 {
        self.weights.sum()
    }

    /// Materialises the mask at the full shape of the variable.
    pub fn to_tensor(&self) -> Tensor {
        let shape = self.descriptor.shape();
        if let VariableDescriptor::Latent { .. } = self.descriptor {
            return self.weights.clone();
        }
        let cols = shape[1];
        let data = self
            .weights
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        Tensor::from_parts(shape, data)
    }
}

/// Resizes the mask to the descriptor's grid.
pub fn fit_to(mask: &SoftMask, descriptor: VariableDescriptor) -> Result<FittedMask> {
    let (h, w) = descriptor.grid();
    let shape = descriptor.shape();
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape,
            reason: "mask target has an empty axis".into(),
        });
    }
    let resized = resize_bilinear(mask.field(), h, w)?;
    let weights = resized.map(|v| v.clamp(0.0, 1.0))?;
    Ok(FittedMask { descriptor, weights })
}
