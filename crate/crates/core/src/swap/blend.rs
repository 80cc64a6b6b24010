use crate::adapt::{masked_adain, masked_adain_vjp};
use crate::denoiser::{VariableBlend, VariableClass};
use crate::error::{Error, Result};
use crate::masks::{FittedMask, VariableDescriptor};
use crate::numerics::Tensor;

fn check(src: &Tensor, tgt: &Tensor, mask: &FittedMask) -> Result<usize> {
    tgt.ensure_shape("blend target", src.shape())?;
    let desc = mask.descriptor();
    let ok = match desc {
        VariableDescriptor::Latent { h, w } => {
            matches!(src.rank(), 2 | 3) && src.shape()[0] == h && src.shape()[1] == w
        }
        d => src.shape() == d.shape().as_slice(),
    };
    if !ok {
        return Err(Error::ShapeMismatch {
            context: "blend mask",
            expected: desc.shape(),
            got: src.shape().to_vec(),
        });
    }
    Ok(src.len() / mask.weights().len())
}

/// `V_src·(1 − m) + V_tgt·m` with one weight per position (query row or
/// latent pixel), broadcast over the trailing axis. Computed as
/// `src + m·(tgt − src)` so `m = 0` returns the source exactly and
/// `V_tgt = V_src` returns it for any `m`.
pub fn blend_variable(src: &Tensor, tgt: &Tensor, mask: &FittedMask) -> Result<Tensor> {
    let cols = check(src, tgt, mask)?;
    let m = mask.weights();
    let data = src
        .data()
        .iter()
        .zip(tgt.data())
        .enumerate()
        .map(|(i, (&s, &t))| {
            let w = m[i / cols];
            if w == 0.0 {
                s
            } else if w == 1.0 {
                t
            } else {
                s + w * (t - s)
            }
        })
        .collect();
    Tensor::new(src.shape().to_vec(), data)
}

fn adain_eligible(mask: &FittedMask) -> Result<()> {
    match mask.descriptor() {
        VariableDescriptor::Latent { .. } | VariableDescriptor::SelfOut { .. } => Ok(()),
        d => Err(Error::invalid(format!(
            "style adaptation applies to latents and self-attention outputs, not {d:?}"
        ))),
    }
}

/// Foreground takes the concept re-normalised to the source's masked
/// statistics; background keeps the source. A zero-mass mask returns the
/// source unchanged.
pub fn blend_with_adain(src: &Tensor, concept: &Tensor, mask: &FittedMask) -> Result<Tensor> {
    adain_eligible(mask)?;
    check(src, concept, mask)?;
    if mask.mass() == 0.0 {
        return Ok(src.clone());
    }
    let adapted = masked_adain(src, concept, mask.weights())?;
    blend_variable(src, &adapted, mask)
}

/// Blends a live network variable against a recorded one.
pub struct MaskedBlend<'a> {
    pub source: &'a Tensor,
    pub mask: FittedMask,
    pub adain: bool,
}

impl MaskedBlend<'_> {
    fn uses_adain(&self, class: VariableClass) -> bool {
        self.adain && class == VariableClass::SelfOut && self.mask.mass() > 0.0
    }
}

impl VariableBlend for MaskedBlend<'_> {
    fn apply(&self, class: VariableClass, live: &Tensor) -> Result<Tensor> {
        if self.uses_adain(class) {
            blend_with_adain(self.source, live, &self.mask)
        } else {
            blend_variable(self.source, live, &self.mask)
        }
    }

    fn vjp(&self, class: VariableClass, live: &Tensor, d_out: &Tensor) -> Result<Tensor> {
        let cols = check(self.source, live, &self.mask)?;
        let m = self.mask.weights();
        let scaled = Tensor::new(
            d_out.shape().to_vec(),
            d_out.data().iter().enumerate().map(|(i, &g)| g * m[i / cols]).collect(),
        )?;
        if self.uses_adain(class) {
            masked_adain_vjp(self.source, live, m, &scaled)
        } else {
            Ok(scaled)
        }
    }
}
