//! Fixed-architecture denoising U-Net with one self-attention and one
//! cross-attention layer per block.
//!
//! The network can record its attention variables, have them replaced or
//! blended mid-pass, and propagate cotangents back to the input latent and
//! the conditioning tokens.

mod layers;
mod net;
mod weights;

pub use net::{Denoiser, EnergyGradient, Vjp};
pub use weights::{DenoiserConfig, Weights};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Prompt embeddings plus the unconditional ("null") embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSet {
    tokens: Tensor,
    null: Vec<f32>,
    null_per_step: Option<Vec<Vec<f32>>>,
}

impl ConditioningSet {
    /// `tokens` is `T_tok × d_text`; `null` has length `d_text`.
    pub fn new(tokens: Tensor, null: Vec<f32>) -> Result<Self> {
        let (count, dim) = tokens.dims2()?;
        if count == 0 {
            return Err(Error::invalid("conditioning needs at least one token"));
        }
        if null.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "null embedding",
                expected: vec![dim],
                got: vec![null.len()],
            });
        }
        if null.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("null embedding"));
        }
        Ok(Self {
            tokens,
            null,
            null_per_step: None,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn check_token(&self, k: usize) -> Result<()> {
        if k < self.token_count() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "conditioning token",
                index: k,
                len: self.token_count(),
            })
        }
    }

    pub fn base_null(&self) -> &[f32] {
        &self.null
    }

    /// Null embedding used at step `t` (1-based).
    pub fn null_embedding(&self, t: usize) -> &[f32] {
        match &self.null_per_step {
            Some(v) if t >= 1 && t <= v.len() => &v[t - 1],
            _ => &self.null,
        }
    }

    /// Single-token context for the unconditional branch at step `t`.
    pub fn null_context(&self, t: usize) -> Tensor {
        Tensor::from_parts(vec![1, self.text_dim()], self.null_embedding(t).to_vec())
    }

    pub fn null_schedule(&self) -> Option<&[Vec<f32>]> {
        self.null_per_step.as_deref()
    }

    /// Attaches per-step null embeddings, indexed by `t - 1`.
    pub fn with_null_schedule(mut self, per_step: Vec<Vec<f32>>) -> Result<Self> {
        let dim = self.text_dim();
        if per_step.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("per-step null embedding has wrong width"));
        }
        if per_step.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("null schedule"));
        }
        self.null_per_step = Some(per_step);
        Ok(self)
    }

    /// Copy with rows `k..k+rows.len()` replaced; the concept-token swap.
    pub fn with_tokens_at(&self, k: usize, rows: &Tensor) -> Result<Self> {
        let (n, dim) = match rows.rank() {
            1 => (1, rows.shape()[0]),
            _ => rows.dims2()?,
        };
        if dim != self.text_dim() {
            return Err(Error::ShapeMismatch {
                context: "concept embedding",
                expected: vec![self.text_dim()],
                got: vec![dim],
            });
        }
        if k + n > self.token_count() {
            return Err(Error::OutOfRange {
                what: "concept token span",
                index: k + n - 1,
                len: self.token_count(),
            });
        }
        let mut data = self.tokens.data().to_vec();
        data[k * dim..(k + n) * dim].copy_from_slice(rows.data());
        Ok(Self {
            tokens: Tensor::new(self.tokens.shape().to_vec(), data)?,
            null: self.null.clone(),
            null_per_step: self.null_per_step.clone(),
        })
    }
}

/// Attention variables of one layer in one denoiser pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub info: LayerInfo,
    /// Self-attention map `M`, `N_q × N_q`.
    pub self_map: Tensor,
    /// Cross-attention map `A`, `N_q × T_tok`.
    pub cross_map: Tensor,
    /// Self-attention output `φ = M·V`, `N_q × C`.
    pub self_out: Tensor,
}

/// Everything recorded during one denoiser call.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    /// Latent fed to the denoiser at this step.
    pub latent: Tensor,
    pub layers: Vec<LayerTrace>,
}

/// Per-step records of a whole sampling or inversion run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UNetTrace {
    pub steps: Vec<StepTrace>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Encoder,
    Middle,
    Decoder,
}

/// Geometry of one attention layer slot for a given latent size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub index: usize,
    pub level: usize,
    pub role: BlockRole,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl LayerInfo {
    pub fn queries(&self) -> usize {
        self.h * self.w
    }
}

/// Variables that can be replaced inside the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariableClass {
    SelfMap,
    CrossMap,
    SelfOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    Index(usize),
}

/// Mixes a live variable with a stored one. Implementations also supply the
/// vector–Jacobian product so gradients flow through blended layers.
pub trait VariableBlend {
    fn apply(&self, class: VariableClass, live: &Tensor) -> Result<Tensor>;
    fn vjp(&self, class: VariableClass, live: &Tensor, d_out: &Tensor) -> Result<Tensor>;
}

pub enum OverrideAction<'a> {
    Replace(&'a Tensor),
    Blend(&'a dyn VariableBlend),
}

pub struct VariableOverride<'a> {
    pub class: VariableClass,
    pub layer: LayerSelector,
    pub action: OverrideAction<'a>,
}

impl<'a> VariableOverride<'a> {
    pub fn replace(class: VariableClass, layer: usize, value: &'a Tensor) -> Self {
        Self {
            class,
            layer: LayerSelector::Index(layer),
            action: OverrideAction::Replace(value),
        }
    }

    pub fn blend(class: VariableClass, layer: usize, blend: &'a dyn VariableBlend) -> Self {
        Self {
            class,
            layer: LayerSelector::Index(layer),
            action: OverrideAction::Blend(blend),
        }
    }
}

/// One layer's cross-attention map as seen by an energy functional.
pub struct CrossMapView<'a> {
    pub layer: LayerInfo,
    pub map: &'a Tensor,
}

/// Scalar functional of the cross-attention maps of a single pass.
pub trait CrossAttentionEnergy {
    /// Token column the energy reads, for range checking.
    fn token(&self) -> Option<usize> {
        None
    }

    /// Returns the energy and its gradient with respect to each map.
    fn evaluate(&self, maps: &[CrossMapView<'_>]) -> Result<(f64, Vec<Tensor>)>;
}
