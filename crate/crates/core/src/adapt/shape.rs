use crate::denoiser::{CrossAttentionEnergy, CrossMapView, StepTrace};
use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, resize_bilinear_adjoint, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShapeMode {
    /// Indicator of `normalised > threshold`.
    Hard,
    /// `logistic((normalised − threshold)/τ)`; differentiable.
    #[default]
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeConfig {
    pub threshold: f64,
    pub tau: f64,
    pub mode: ShapeMode,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.4,
            tau: 0.1,
            mode: ShapeMode::Soft,
        }
    }
}

impl ShapeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "shape threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("shape softness must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn hard(self) -> Self {
        Self {
            mode: ShapeMode::Hard,
            ..self
        }
    }

    pub fn soft(self) -> Self {
        Self {
            mode: ShapeMode::Soft,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeField {
    /// `h × w` field in `[0, 1]`.
    pub field: Tensor,
    /// Set when the attention column was constant; the field is then zero.
    pub degenerate: bool,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn column(a: &Tensor, k: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let (n, tokens) = a.dims2()?;
    if k >= tokens {
        return Err(Error::OutOfRange {
            what: "shape token",
            index: k,
            len: tokens,
        });
    }
    if n != h * w {
        return Err(Error::ShapeMismatch {
            context: "extract_shape grid",
            expected: vec![h * w, tokens],
            got: a.shape().to_vec(),
        });
    }
    Ok((0..n).map(|r| a.data()[r * tokens + k] as f64).collect())
}

fn min_max(col: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in col.iter().enumerate() {
        if v < col[lo] {
            lo = i;
        }
        if v > col[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Object footprint of token `k`: its attention column reshaped to `h × w`,
/// min–max normalised, then thresholded (hard) or passed through a logistic
/// (soft).
pub fn extract_shape(a: &Tensor, k: usize, h: usize, w: usize, config: &ShapeConfig) -> Result<ShapeField> {
    config.validate()?;
    let col = column(a, k, h, w)?;
    let (lo, hi) = min_max(&col);
    let range = col[hi] - col[lo];
    if !(range > 0.0) {
        return Ok(ShapeField {
            field: Tensor::zeros(vec![h, w]),
            degenerate: true,
        });
    }
    let data = col
        .iter()
        .map(|&v| {
            let n = (v - col[lo]) / range;
            match config.mode {
                ShapeMode::Hard => f32::from(u8::from(n > config.threshold)),
                ShapeMode::Soft => logistic((n - config.threshold) / config.tau) as f32,
            }
        })
        .collect();
    Ok(ShapeField {
        field: Tensor::from_parts(vec![h, w], data),
        degenerate: false,
    })
}

/// Pulls a cotangent on the soft shape back to the full cross-attention map
/// (non-zero only in column `k`).
pub fn extract_shape_vjp(
    a: &Tensor,
    k: usize,
    h: usize,
    w: usize,
    config: &ShapeConfig,
    d_shape: &Tensor,
) -> Result<Tensor> {
    config.validate()?;
    d_shape.ensure_shape("extract_shape_vjp", &[h, w])?;
    let col = column(a, k, h, w)?;
    let tokens = a.shape()[1];
    let mut out = Tensor::zeros(a.shape().to_vec());
    let (lo, hi) = min_max(&col);
    let range = col[hi] - col[lo];
    if !(range > 0.0) || config.mode == ShapeMode::Hard {
        return Ok(out);
    }
    let mut d_col = vec![0f64; col.len()];
    let mut d_lo = 0f64;
    let mut d_hi = 0f64;
    for (i, &v) in col.iter().enumerate() {
        let n = (v - col[lo]) / range;
        let s = logistic((n - config.threshold) / config.tau);
        let dn = d_shape.data()[i] as f64 * s * (1.0 - s) / config.tau;
        d_col[i] += dn / range;
        d_lo += dn * (v - col[hi]) / (range * range);
        d_hi -= dn * (v - col[lo]) / (range * range);
    }
    d_col[lo] += d_lo;
    d_col[hi] += d_hi;
    let data = out.data_mut();
    for (r, g) in d_col.into_iter().enumerate() {
        data[r * tokens + k] = g as f32;
    }
    Ok(out)
}

/// `Σ |mask − shape|`.
pub fn shape_energy(mask: &Tensor, shape: &Tensor) -> Result<f64> {
    shape.ensure_shape("shape_energy", mask.shape())?;
    Ok(mask
        .data()
        .iter()
        .zip(shape.data())
        .map(|(&m, &s)| (m as f64 - s as f64).abs())
        .sum())
}

/// Mean over layers of each layer's shape resized to `out_h × out_w`.
pub fn aggregate_shape(
    step: &StepTrace,
    k: usize,
    config: &ShapeConfig,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    if step.layers.is_empty() {
        return Err(Error::invalid("step trace holds no attention layers"));
    }
    let mut acc = vec![0f64; out_h * out_w];
    for layer in &step.layers {
        let s = extract_shape(&layer.cross_map, k, layer.info.h, layer.info.w, config)?;
        let up = resize_bilinear(&s.field, out_h, out_w)?;
        for (a, &v) in acc.iter_mut().zip(up.data()) {
            *a += v as f64;
        }
    }
    let n = step.layers.len() as f64;
    Tensor::new(vec![out_h, out_w], acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// `‖mask − Shape(k)‖₁` over the soft shape aggregated across layers at
/// the mask's resolution.
#[derive(Clone, Debug)]
pub struct ShapeEnergy {
    mask: Tensor,
    token: usize,
    config: ShapeConfig,
}

impl ShapeEnergy {
    pub fn new(mask: Tensor, token: usize, config: ShapeConfig) -> Result<Self> {
        mask.dims2()?;
        config.validate()?;
        Ok(Self {
            mask,
            token,
            config: config.soft(),
        })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

impl CrossAttentionEnergy for ShapeEnergy {
    fn token(&self) -> Option<usize> {
        Some(self.token)
    }

    fn evaluate(&self, maps: &[CrossMapView<'_>]) -> Result<(f64, Vec<Tensor>)> {
        if maps.is_empty() {
            return Err(Error::invalid("shape energy needs at least one layer"));
        }
        let (oh, ow) = self.mask.dims2()?;
        let n = maps.len() as f64;
        let mut shapes = Vec::with_capacity(maps.len());
        let mut agg = vec![0f64; oh * ow];
        for v in maps {
            let s = extract_shape(v.map, self.token, v.layer.h, v.layer.w, &self.config)?;
            let up = resize_bilinear(&s.field, oh, ow)?;
            for (a, &x) in agg.iter_mut().zip(up.data()) {
                *a += x as f64 / n;
            }
            shapes.push(s);
        }
        let mut energy = 0f64;
        let mut d_agg = vec![0f32; oh * ow];
        for ((d, &m), &a) in d_agg.iter_mut().zip(self.mask.data()).zip(&agg) {
            let diff = m as f64 - a;
            energy += diff.abs();
            // d|m − a|/da
            *d = (-diff.signum() * f64::from(u8::from(diff != 0.0)) / n) as f32;
        }
        let d_up = Tensor::from_parts(vec![oh, ow], d_agg);
        let mut grads = Vec::with_capacity(maps.len());
        for (v, s) in maps.iter().zip(&shapes) {
            if s.degenerate {
                grads.push(Tensor::zeros(v.map.shape().to_vec()));
                continue;
            }
            let d_shape = resize_bilinear_adjoint(&d_up, v.layer.h, v.layer.w)?;
            grads.push(extract_shape_vjp(
                v.map,
                self.token,
                v.layer.h,
                v.layer.w,
                &self.config,
                &d_shape,
            )?);
        }
        Ok((energy, grads))
    }
}
