//! Targeted variable swapping: record a source run, then re-run sampling
//! under new conditioning while blending recorded latents and attention
//! variables back in through a mask.

mod blend;

pub use blend::{blend_variable, blend_with_adain, MaskedBlend};

use std::ops::Range;

use crate::adapt::{ShapeConfig, ShapeEnergy};
use crate::denoiser::{
    ConditioningSet, Denoiser, LayerInfo, StepTrace, UNetTrace, VariableClass, VariableOverride,
};
use crate::error::{Error, Result};
use crate::masks::{anneal, fit_to, SoftMask, VariableDescriptor};
use crate::numerics::Tensor;
use crate::scheduler::{NoiseSchedule, RecordingHook, Sampler, SamplerConfig, SamplingHook};

/// Default bound on the source reconstruction error.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-3;

/// Number of leading sampling steps during which each variable is swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwapSchedule {
    pub z: usize,
    pub cross_map: usize,
    pub self_map: usize,
    pub self_out: usize,
}

impl Default for SwapSchedule {
    fn default() -> Self {
        Self {
            z: 30,
            cross_map: 20,
            self_map: 25,
            self_out: 10,
        }
    }
}

impl SwapSchedule {
    /// Every variable swapped at every one of `steps` steps.
    pub fn full(steps: usize) -> Self {
        Self {
            z: steps,
            cross_map: steps,
            self_map: steps,
            self_out: steps,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        for (name, n) in [
            ("z", self.z),
            ("cross map", self.cross_map),
            ("self map", self.self_map),
            ("self output", self.self_out),
        ] {
            if n > steps {
                return Err(Error::invalid(format!(
                    "{name} swap steps {n} exceed sampling steps {steps}"
                )));
            }
        }
        Ok(())
    }

    pub fn steps_for(&self, class: VariableClass) -> usize {
        match class {
            VariableClass::SelfMap => self.self_map,
            VariableClass::CrossMap => self.cross_map,
            VariableClass::SelfOut => self.self_out,
        }
    }
}

/// Latents and attention variables of the source reconstruction.
#[derive(Clone, Debug)]
pub struct SourceTrace {
    /// `z_T, z_{T−1}, …, z_0` of the reconstruction pass.
    pub latents: Vec<Tensor>,
    pub trace: UNetTrace,
    /// Source conditioning, carrying optimised null embeddings if any.
    pub cond: ConditioningSet,
    pub reconstruction_error: f64,
}

impl SourceTrace {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn z_t(&self) -> &Tensor {
        &self.latents[0]
    }

    /// Final latent of the reconstruction.
    pub fn reconstruction(&self) -> &Tensor {
        self.latents.last().expect("trace holds z_T")
    }

    pub fn check_complete(&self, layers: usize) -> Result<()> {
        let steps = self.steps();
        if self.trace.steps.len() != steps || self.trace.steps.iter().any(|s| s.layers.len() != layers) {
            return Err(Error::invalid(format!(
                "source trace incomplete: expected {steps} steps of {layers} layers"
            )));
        }
        Ok(())
    }
}

/// Inverts `z0`, optionally refines null embeddings, and records a full
/// reconstruction pass. Fails if the reconstruction misses `z0` by more
/// than `tolerance` (max-abs).
pub fn record_source(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    z0: &Tensor,
    cond: &ConditioningSet,
    tolerance: f64,
) -> Result<SourceTrace> {
    let sampler = Sampler::new(denoiser, schedule, *config)?;
    let inversion = sampler.invert(z0, cond, false)?;
    let cond = if config.null_iters > 0 && config.cfg_scale > 0.0 {
        let nt = sampler.null_text_optimize(&inversion, cond, config.null_iters, config.null_lr)?;
        cond.clone().with_null_schedule(nt.embeddings)?
    } else {
        cond.clone()
    };
    let mut hook = RecordingHook::new(inversion.z_t(), true);
    let rec = sampler.sample(inversion.z_t(), &cond, None, &mut hook)?;
    let error = rec.max_abs_diff(z0)?;
    if error > tolerance {
        return Err(Error::ReconstructionTolerance { error, tolerance });
    }
    Ok(SourceTrace {
        latents: hook.latents,
        trace: hook.trace,
        cond,
        reconstruction_error: error,
    })
}

/// One object swap: where, what, and how.
#[derive(Clone, Debug)]
pub struct SwapPlan {
    pub mask: SoftMask,
    pub source: ConditioningSet,
    pub target: ConditioningSet,
    /// Token rows holding the concept; the first is the guided token.
    pub tokens: Range<usize>,
    pub schedule: SwapSchedule,
    pub sampler: SamplerConfig,
    /// Masked AdaIN on the latent and self-attention output blends.
    pub adain: bool,
    pub shape: ShapeConfig,
    /// When false, attention maps are blended with the mask's core (values
    /// equal to 1) instead of the full soft mask.
    pub soft_attention_masks: bool,
}

impl SwapPlan {
    /// Plan swapping the concept `rows` into `source` at `token`.
    pub fn with_concept(mask: SoftMask, source: &ConditioningSet, token: usize, rows: &Tensor) -> Result<Self> {
        let span = if rows.rank() == 1 { 1 } else { rows.shape()[0] };
        let target = source.with_tokens_at(token, rows)?;
        Self::new(mask, source.clone(), target, token..token + span)
    }

    pub fn new(mask: SoftMask, source: ConditioningSet, target: ConditioningSet, tokens: Range<usize>) -> Result<Self> {
        if tokens.is_empty() || tokens.end > source.token_count() {
            return Err(Error::invalid(format!(
                "concept tokens {tokens:?} outside 0..{}",
                source.token_count()
            )));
        }
        target.tokens().ensure_shape("target conditioning", source.tokens().shape())?;
        let dim = source.text_dim();
        for r in 0..source.token_count() {
            if tokens.contains(&r) {
                continue;
            }
            let (a, b) = (&source.tokens().data()[r * dim..(r + 1) * dim], &target.tokens().data()[r * dim..(r + 1) * dim]);
            if a != b {
                return Err(Error::invalid(format!(
                    "source and target conditioning differ at token {r}, outside the concept span"
                )));
            }
        }
        Ok(Self {
            mask,
            source,
            target,
            tokens,
            schedule: SwapSchedule::default(),
            sampler: SamplerConfig::default(),
            adain: true,
            shape: ShapeConfig::default(),
            soft_attention_masks: true,
        })
    }

    pub fn token(&self) -> usize {
        self.tokens.start
    }
}

/// 1-based sampling steps at which each variable was blended.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlendLog {
    pub z: Vec<usize>,
    pub cross_map: Vec<usize>,
    pub self_map: Vec<usize>,
    pub self_out: Vec<usize>,
}

impl BlendLog {
    fn push(&mut self, class: VariableClass, step: usize) {
        let v = match class {
            VariableClass::SelfMap => &mut self.self_map,
            VariableClass::CrossMap => &mut self.cross_map,
            VariableClass::SelfOut => &mut self.self_out,
        };
        if v.last() != Some(&step) {
            v.push(step);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SwapOutput {
    pub z0: Tensor,
    /// `z_T, z_{T−1}, …, z_0` after blending.
    pub latents: Vec<Tensor>,
    pub log: BlendLog,
}

const CLASSES: [VariableClass; 3] = [VariableClass::SelfMap, VariableClass::CrossMap, VariableClass::SelfOut];

struct SwapHook<'a> {
    trace: &'a SourceTrace,
    plan: &'a SwapPlan,
    infos: Vec<LayerInfo>,
    tokens: usize,
    blends: Vec<(VariableClass, usize, MaskedBlend<'a>)>,
    log: BlendLog,
    latents: Vec<Tensor>,
}

fn core(mask: &SoftMask) -> Result<SoftMask> {
    SoftMask::new(mask.field().map(|v| if v >= 1.0 { 1.0 } else { 0.0 })?)
}

fn recorded(step: &StepTrace, class: VariableClass, layer: usize) -> &Tensor {
    let l = &step.layers[layer];
    match class {
        VariableClass::SelfMap => &l.self_map,
        VariableClass::CrossMap => &l.cross_map,
        VariableClass::SelfOut => &l.self_out,
    }
}

impl<'a> SamplingHook for SwapHook<'a> {
    fn prepare(&mut self, step: usize, _t: usize) -> Result<()> {
        self.blends.clear();
        let n = step + 1;
        let annealed = anneal(&self.plan.mask, step, self.plan.sampler.anneal);
        let map_mask = if self.plan.soft_attention_masks {
            annealed.clone()
        } else {
            core(&annealed)?
        };
        let recorded_step = &self.trace.trace.steps[step];
        for class in CLASSES {
            if n > self.plan.schedule.steps_for(class) {
                continue;
            }
            self.log.push(class, n);
            let mask = if class == VariableClass::SelfOut { &annealed } else { &map_mask };
            for info in &self.infos {
                let desc = VariableDescriptor::for_layer(class, info, self.tokens);
                self.blends.push((
                    class,
                    info.index,
                    MaskedBlend {
                        source: recorded(recorded_step, class, info.index),
                        mask: fit_to(mask, desc)?,
                        adain: self.plan.adain,
                    },
                ));
            }
        }
        Ok(())
    }

    fn overrides(&self) -> Vec<VariableOverride<'_>> {
        self.blends
            .iter()
            .map(|(class, layer, b)| VariableOverride::blend(*class, *layer, b))
            .collect()
    }

    fn after_step(&mut self, step: usize, _t: usize, z: &mut Tensor) -> Result<()> {
        let n = step + 1;
        if n > self.plan.schedule.z {
            self.latents.push(z.clone());
            return Ok(());
        }
        self.log.z.push(n);
        let (h, w, _) = z.dims3()?;
        let annealed = anneal(&self.plan.mask, step, self.plan.sampler.anneal);
        let m = fit_to(&annealed, VariableDescriptor::Latent { h, w })?;
        let src = &self.trace.latents[n];
        *z = if self.plan.adain {
            blend_with_adain(src, z, &m)?
        } else {
            blend_variable(src, z, &m)?
        };
        self.latents.push(z.clone());
        Ok(())
    }
}

/// Samples from the trace's `z_T` under the plan's target conditioning,
/// blending each variable class against the recorded source for the first
/// `schedule` steps.
pub fn swap_generate(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    trace: &SourceTrace,
    plan: &SwapPlan,
) -> Result<SwapOutput> {
    let steps = schedule.steps();
    if trace.steps() != steps {
        return Err(Error::invalid(format!(
            "trace has {} steps, schedule has {steps}",
            trace.steps()
        )));
    }
    plan.schedule.validate(steps)?;
    let (h, w, _) = trace.z_t().dims3()?;
    if plan.mask.dims() != (h, w) {
        return Err(Error::ShapeMismatch {
            context: "swap mask",
            expected: vec![h, w],
            got: vec![plan.mask.dims().0, plan.mask.dims().1],
        });
    }
    let infos = denoiser.layer_infos(h, w)?;
    trace.check_complete(infos.len())?;
    if plan.mask.mass() == 0.0 {
        log::warn!("swap mask is empty; returning the source reconstruction");
        return Ok(SwapOutput {
            z0: trace.reconstruction().clone(),
            latents: trace.latents.clone(),
            log: BlendLog::default(),
        });
    }
    let target = match trace.cond.null_schedule() {
        Some(s) => plan.target.clone().with_null_schedule(s.to_vec())?,
        None => plan.target.clone(),
    };
    let sampler = Sampler::new(denoiser, schedule, plan.sampler)?;
    let guidance = if plan.sampler.shape_weight > 0.0 {
        let m = fit_to(&plan.mask, VariableDescriptor::Latent { h, w })?;
        Some(ShapeEnergy::new(m.grid().clone(), plan.token(), plan.shape)?)
    } else {
        None
    };
    let mut hook = SwapHook {
        trace,
        plan,
        infos,
        tokens: target.token_count(),
        blends: Vec::new(),
        log: BlendLog::default(),
        latents: vec![trace.z_t().clone()],
    };
    let z0 = sampler.sample(trace.z_t(), &target, guidance.as_ref(), &mut hook)?;
    Ok(SwapOutput {
        z0,
        latents: hook.latents,
        log: hook.log,
    })
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub reconstruction_error: f64,
    pub log: BlendLog,
}

#[derive(Clone, Debug)]
pub struct MultiSwapOutput {
    pub z0: Tensor,
    /// Reconstruction of the original input (first stage), if any stage ran.
    pub reconstruction: Option<Tensor>,
    pub stages: Vec<StageReport>,
}

/// Applies the plans one after another, re-recording the source from each
/// intermediate result.
pub fn multi_swap(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    plans: &[SwapPlan],
    tolerance: f64,
) -> Result<MultiSwapOutput> {
    for (i, a) in plans.iter().enumerate() {
        for b in &plans[i + 1..] {
            let overlap = a
                .mask
                .field()
                .data()
                .iter()
                .zip(b.mask.field().data())
                .any(|(&x, &y)| x > 0.0 && y > 0.0);
            if overlap {
                log::warn!("multi-swap masks overlap; later swaps may alter earlier ones");
            }
        }
    }
    let mut z = z0.clone();
    let mut reconstruction = None;
    let mut stages = Vec::with_capacity(plans.len());
    for plan in plans {
        let trace = record_source(denoiser, schedule, &plan.sampler, &z, &plan.source, tolerance)?;
        if reconstruction.is_none() {
            reconstruction = Some(trace.reconstruction().clone());
        }
        let out = swap_generate(denoiser, schedule, &trace, plan)?;
        stages.push(StageReport {
            reconstruction_error: trace.reconstruction_error,
            log: out.log,
        });
        z = out.z0;
    }
    Ok(MultiSwapOutput {
        z0: z,
        reconstruction,
        stages,
    })
}
