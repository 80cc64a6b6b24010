//! Binary and soft masks: loading, dilation, feathering, annealing and
//! fitting to the shape of latents and attention variables.

mod fit;
mod pgm;

pub use fit::{fit_to, FittedMask, VariableDescriptor};
pub use pgm::{load_binary_pgm, read_binary_pgm, save_soft_pgm, write_soft_pgm};

use crate::error::{Error, Result};
use crate::numerics::{conv2d, gaussian_kernel, Padding, Tensor};

/// `H×W` mask with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    field: Tensor,
}

impl BinaryMask {
    pub fn new(field: Tensor) -> Result<Self> {
        field.dims2()?;
        if let Some(v) = field.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("binary mask holds non-binary value {v}")));
        }
        Ok(Self { field })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let field = Tensor::from_fn(vec![h, w], |i| f32::from(u8::from(f(i / w, i % w))))?;
        Self::new(field)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            field: Tensor::zeros(vec![h, w]),
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            field: Tensor::full(vec![h, w], 1.0),
        }
    }

    pub fn field(&self) -> &Tensor {
        &self.field
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.field.shape()[0], self.field.shape()[1])
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.field.get2(i, j) == 1.0
    }

    pub fn count(&self) -> usize {
        self.field.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// All-background or all-foreground.
    pub fn is_degenerate(&self) -> bool {
        let c = self.count();
        c == 0 || c == self.field.len()
    }
}

/// Mask with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    field: Tensor,
    provenance: Option<FeatherParams>,
}

impl SoftMask {
    pub fn new(field: Tensor) -> Result<Self> {
        field.dims2()?;
        if let Some(v) = field.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!("soft mask value {v} outside [0,1]")));
        }
        Ok(Self {
            field,
            provenance: None,
        })
    }

    pub fn field(&self) -> &Tensor {
        &self.field
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.field.shape()[0], self.field.shape()[1])
    }

    /// Feather parameters this mask was produced with, if any.
    pub fn provenance(&self) -> Option<FeatherParams> {
        self.provenance
    }

    pub fn mass(&self) -> f64 {
        self.field.sum()
    }
}

impl From<&BinaryMask> for SoftMask {
    fn from(m: &BinaryMask) -> Self {
        Self {
            field: m.field.clone(),
            provenance: None,
        }
    }
}

fn check_extent(extent: usize) -> Result<()> {
    if extent == 0 || extent % 2 == 0 {
        return Err(Error::invalid(format!(
            "dilation extent must be odd and at least 1, got {extent}"
        )));
    }
    Ok(())
}

/// Offsets of the elliptical structuring element of odd `extent`: pixel
/// centres inside the inscribed ellipse with semi-axes `extent/2`.
pub fn structuring_element(extent: usize) -> Result<Vec<(isize, isize)>> {
    check_extent(extent)?;
    let r = (extent / 2) as isize;
    let a = extent as f64 / 2.0;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (dy as f64 / a, dx as f64 / a);
            if y * y + x * x <= 1.0 {
                out.push((dy, dx));
            }
        }
    }
    Ok(out)
}

/// Morphological dilation with the elliptical element.
pub fn dilate(mask: &BinaryMask, extent: usize) -> Result<BinaryMask> {
    let se = structuring_element(extent)?;
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |i, j| {
        se.iter().any(|&(dy, dx)| {
            let (y, x) = (i as isize + dy, j as isize + dx);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatherParams {
    /// Odd structuring-element extent.
    pub extent: usize,
    pub sigma: f64,
    /// Gaussian support radius; 0 disables blurring.
    pub radius: usize,
}

impl Default for FeatherParams {
    fn default() -> Self {
        Self {
            extent: 5,
            sigma: 2.0,
            radius: 4,
        }
    }
}

/// Dilate, Gaussian-blur, then restore 1 on the original foreground.
pub fn feather(mask: &BinaryMask, params: FeatherParams) -> Result<SoftMask> {
    let dilated = dilate(mask, params.extent)?;
    let kernel = gaussian_kernel(params.sigma, params.radius)?;
    let blurred = conv2d(dilated.field(), &kernel, Padding::Replicate)?;
    let field = blurred.zip_map(mask.field(), |s, m| if m == 1.0 { 1.0 } else { s.clamp(0.0, 1.0) })?;
    Ok(SoftMask {
        field,
        provenance: Some(params),
    })
}

/// Number of leading sampling steps over which the mask ramps from 0 to 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnealSchedule {
    pub steps: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { steps: 30 }
    }
}

impl AnnealSchedule {
    pub fn new(steps: usize) -> Self {
        Self { steps }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.steps > total_steps {
            return Err(Error::invalid(format!(
                "anneal steps {} exceed sampling steps {total_steps}",
                self.steps
            )));
        }
        Ok(())
    }

    /// `min(t_step/K, 1)`; 1 when `K = 0`.
    pub fn rate(&self, t_step: usize) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            (t_step as f64 / self.steps as f64).min(1.0)
        }
    }
}

/// Scales the mask's non-zero values by the schedule rate at `t_step`.
pub fn anneal(mask: &SoftMask, t_step: usize, schedule: AnnealSchedule) -> SoftMask {
    let rate = schedule.rate(t_step);
    if rate == 1.0 {
        return mask.clone();
    }
    let field = Tensor::from_parts(
        mask.field.shape().to_vec(),
        mask.field.data().iter().map(|&v| (v as f64 * rate) as f32).collect(),
    );
    SoftMask {
        field,
        provenance: mask.provenance,
    }
}
