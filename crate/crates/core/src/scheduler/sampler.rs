use crate::adapt::ShapeEnergy;
use crate::denoiser::{ConditioningSet, Denoiser, StepTrace, UNetTrace, VariableOverride};
use crate::error::{Error, Result};
use crate::masks::AnnealSchedule;
use crate::numerics::Tensor;
use crate::scheduler::NoiseSchedule;

/// Guidance and refinement settings for a sampling run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Classifier-free guidance strength `s`.
    pub cfg_scale: f64,
    /// Shape guidance weight `v`.
    pub shape_weight: f64,
    /// Token whose attention footprint shape guidance acts on.
    pub token: Option<usize>,
    pub anneal: AnnealSchedule,
    pub null_iters: usize,
    pub null_lr: f64,
    /// Cap on fixed-point iterations per inversion step.
    pub invert_refine: usize,
    /// Fixed-point iteration stops once the max-abs update is at most this.
    pub invert_tol: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 0.0,
            shape_weight: 0.0,
            token: None,
            anneal: AnnealSchedule::default(),
            null_iters: 0,
            null_lr: 1.0,
            invert_refine: 40,
            invert_tol: 1e-6,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::invalid(format!("cfg scale must be >= 0, got {}", self.cfg_scale)));
        }
        if !(self.shape_weight >= 0.0) || !self.shape_weight.is_finite() {
            return Err(Error::invalid(format!(
                "shape weight must be >= 0, got {}",
                self.shape_weight
            )));
        }
        if !(self.null_lr > 0.0) || !self.null_lr.is_finite() {
            return Err(Error::invalid(format!("null-text step size must be > 0, got {}", self.null_lr)));
        }
        self.anneal.validate(schedule.steps())
    }
}

/// Callbacks into a sampling run. `step` counts from 0 at the noisiest step;
/// `t` is the diffusion step being denoised (`T − step`).
pub trait SamplingHook {
    fn prepare(&mut self, _step: usize, _t: usize) -> Result<()> {
        Ok(())
    }

    /// Variable overrides for the conditional branch of the current step.
    fn overrides(&self) -> Vec<VariableOverride<'_>> {
        Vec::new()
    }

    fn record(&self) -> bool {
        false
    }

    fn after_predict(&mut self, _step: usize, _t: usize, _eps: &mut Tensor, _trace: Option<StepTrace>) -> Result<()> {
        Ok(())
    }

    fn after_step(&mut self, _step: usize, _t: usize, _z: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

/// Hook that does nothing.
pub struct NoHook;

impl SamplingHook for NoHook {}

/// Collects the latent after every step and, optionally, every trace.
#[derive(Default)]
pub struct RecordingHook {
    record: bool,
    /// `z_T, z_{T−1}, …, z_0`.
    pub latents: Vec<Tensor>,
    pub trace: UNetTrace,
}

impl RecordingHook {
    pub fn new(z_t: &Tensor, record: bool) -> Self {
        Self {
            record,
            latents: vec![z_t.clone()],
            trace: UNetTrace::default(),
        }
    }
}

impl SamplingHook for RecordingHook {
    fn record(&self) -> bool {
        self.record
    }

    fn after_predict(&mut self, _: usize, _: usize, _: &mut Tensor, trace: Option<StepTrace>) -> Result<()> {
        if let Some(tr) = trace {
            self.trace.steps.push(tr);
        }
        Ok(())
    }

    fn after_step(&mut self, _: usize, _: usize, z: &mut Tensor) -> Result<()> {
        self.latents.push(z.clone());
        Ok(())
    }
}

/// Noise prediction after guidance.
#[derive(Clone, Debug)]
pub struct GuidedPrediction {
    pub eps: Tensor,
    pub trace: Option<StepTrace>,
    pub energy: Option<f64>,
    /// `∇_z` of the shape energy (conditional branch).
    pub gradient: Option<Tensor>,
}

/// Inversion trajectory `z_0, z_1, …, z_T`.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub latents: Vec<Tensor>,
    pub trace: Option<UNetTrace>,
}

impl Inversion {
    pub fn z_t(&self) -> &Tensor {
        self.latents.last().expect("inversion holds z_0")
    }
}

/// Per-step null embeddings and objectives from null-text optimisation,
/// all indexed by `t − 1`.
#[derive(Clone, Debug)]
pub struct NullTextResult {
    pub embeddings: Vec<Vec<f32>>,
    pub baseline: Vec<f64>,
    pub objective: Vec<f64>,
    /// Gradient norm at the first iterate of each step.
    pub gradient_norm: Vec<f64>,
    /// Final latent of the optimised trajectory.
    pub z0: Tensor,
}

/// `(1 + s)·eps_cond − s·eps_null`, exactly `eps_cond` when `s = 0`.
pub fn combine_cfg(cond: &Tensor, null: &Tensor, s: f64) -> Result<Tensor> {
    if s == 0.0 {
        return Ok(cond.clone());
    }
    cond.zip_map(null, |c, n| ((1.0 + s) * c as f64 - s * n as f64) as f32)
}

pub struct Sampler<'a> {
    denoiser: &'a Denoiser,
    schedule: &'a NoiseSchedule,
    config: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(denoiser: &'a Denoiser, schedule: &'a NoiseSchedule, config: SamplerConfig) -> Result<Self> {
        config.validate(schedule)?;
        Ok(Self {
            denoiser,
            schedule,
            config,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        self.denoiser
    }

    /// Classifier-free combination; overrides apply to the conditional
    /// branch only.
    pub fn cfg_eps(
        &self,
        z: &Tensor,
        t: usize,
        cond: &ConditioningSet,
        overrides: &[VariableOverride<'_>],
        record: bool,
    ) -> Result<(Tensor, Option<StepTrace>)> {
        let (ec, trace) = self
            .denoiser
            .predict_noise_with_overrides(z, t, cond.tokens(), overrides, record)?;
        let s = self.config.cfg_scale;
        if s == 0.0 {
            return Ok((ec, trace));
        }
        let (en, _) = self.denoiser.predict_noise(z, t, &cond.null_context(t), false)?;
        Ok((combine_cfg(&ec, &en, s)?, trace))
    }

    /// `cfg_eps + v·σ_t·∇_z E`, with the energy gradient taken on the
    /// conditional branch.
    pub fn guided_eps(
        &self,
        z: &Tensor,
        t: usize,
        cond: &ConditioningSet,
        guidance: Option<&ShapeEnergy>,
        overrides: &[VariableOverride<'_>],
        record: bool,
    ) -> Result<GuidedPrediction> {
        let v = self.config.shape_weight;
        let Some(energy) = guidance.filter(|_| v != 0.0) else {
            let (eps, trace) = self.cfg_eps(z, t, cond, overrides, record)?;
            return Ok(GuidedPrediction {
                eps,
                trace,
                energy: None,
                gradient: None,
            });
        };
        let (h, w, _) = z.dims3()?;
        energy.mask().ensure_shape("guidance mask", &[h, w])?;
        let g = self
            .denoiser
            .energy_gradient(z, t, cond.tokens(), energy, overrides)?;
        let trace = if record {
            self.denoiser
                .predict_noise_with_overrides(z, t, cond.tokens(), overrides, true)?
                .1
        } else {
            None
        };
        let s = self.config.cfg_scale;
        let combined = if s == 0.0 {
            g.eps
        } else {
            let (en, _) = self.denoiser.predict_noise(z, t, &cond.null_context(t), false)?;
            combine_cfg(&g.eps, &en, s)?
        };
        let k = v * self.schedule.sigma(t);
        let eps = combined.zip_map(&g.gradient, |e, d| (e as f64 + k * d as f64) as f32)?;
        eps.ensure_finite("guided noise")?;
        Ok(GuidedPrediction {
            eps,
            trace,
            energy: Some(g.energy),
            gradient: Some(g.gradient),
        })
    }

    /// DDIM inversion with the conditional noise estimate. Each step starts
    /// from the estimate at `z_{t−1}` and then iterates
    /// `z_t ← inverse(z_{t−1}, eps(z_t))` until the update falls below
    /// `invert_tol` (at most `invert_refine` times), so that a forward step
    /// from `z_t` lands back on `z_{t−1}`.
    pub fn invert(&self, z0: &Tensor, cond: &ConditioningSet, record: bool) -> Result<Inversion> {
        z0.ensure_finite("inversion input")?;
        let steps = self.schedule.steps();
        let mut latents = Vec::with_capacity(steps + 1);
        latents.push(z0.clone());
        let mut trace = record.then(UNetTrace::default);
        for t in 1..=steps {
            let prev = latents.last().expect("non-empty");
            let (eps, _) = self.denoiser.predict_noise(prev, t, cond.tokens(), false)?;
            let mut zt = self.schedule.ddim_inverse_step(prev, &eps, t)?;
            let mut last_change = f64::INFINITY;
            for _ in 0..self.config.invert_refine {
                let (eps, _) = self.denoiser.predict_noise(&zt, t, cond.tokens(), false)?;
                let next = self.schedule.ddim_inverse_step(prev, &eps, t)?;
                let change = next.max_abs_diff(&zt)?;
                if change > last_change {
                    // not contracting; keep the better iterate
                    break;
                }
                zt = next;
                last_change = change;
                if change <= self.config.invert_tol {
                    break;
                }
            }
            if let Some(tr) = trace.as_mut() {
                let (_, st) = self.denoiser.predict_noise(&zt, t, cond.tokens(), true)?;
                tr.steps.push(st.expect("recorded"));
            }
            latents.push(zt);
        }
        Ok(Inversion { latents, trace })
    }

    /// Denoises `z_T` to `z_0`, calling the hook around every step.
    pub fn sample(
        &self,
        z_t: &Tensor,
        cond: &ConditioningSet,
        guidance: Option<&ShapeEnergy>,
        hook: &mut dyn SamplingHook,
    ) -> Result<Tensor> {
        z_t.ensure_finite("sampling input")?;
        let steps = self.schedule.steps();
        let mut z = z_t.clone();
        for step in 0..steps {
            let t = steps - step;
            hook.prepare(step, t)?;
            let pred = {
                let overrides = hook.overrides();
                self.guided_eps(&z, t, cond, guidance, &overrides, hook.record())?
            };
            let mut eps = pred.eps;
            hook.after_predict(step, t, &mut eps, pred.trace)?;
            z = self.schedule.ddim_step(&z, &eps, t)?;
            hook.after_step(step, t, &mut z)?;
        }
        Ok(z)
    }

    /// Optimises the per-step null embedding so the guided trajectory from
    /// `z_T` tracks the inversion trajectory. Steps that would raise the
    /// objective are rejected and the step size halved.
    pub fn null_text_optimize(
        &self,
        inversion: &Inversion,
        cond: &ConditioningSet,
        iters: usize,
        lr: f64,
    ) -> Result<NullTextResult> {
        let steps = self.schedule.steps();
        if inversion.latents.len() != steps + 1 {
            return Err(Error::invalid(format!(
                "inversion has {} latents, schedule needs {}",
                inversion.latents.len(),
                steps + 1
            )));
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("null-text step size must be > 0, got {lr}")));
        }
        let s = self.config.cfg_scale;
        let dt = cond.text_dim();
        let mut embeddings = vec![Vec::new(); steps];
        let mut baseline = vec![0.0; steps];
        let mut objective = vec![0.0; steps];
        let mut gradient_norm = vec![0.0; steps];
        let mut z = inversion.z_t().clone();
        let mut current = cond.base_null().to_vec();
        for t in (1..=steps).rev() {
            let target = &inversion.latents[t - 1];
            let (ec, _) = self.denoiser.predict_noise(&z, t, cond.tokens(), false)?;
            let eval = |emb: &[f32]| -> Result<(f64, Tensor, Tensor)> {
                let ctx = Tensor::new(vec![1, dt], emb.to_vec())?;
                let (en, _) = self.denoiser.predict_noise(&z, t, &ctx, false)?;
                let eps = combine_cfg(&ec, &en, s)?;
                let next = self.schedule.ddim_step(&z, &eps, t)?;
                let r = next.sub(target)?;
                Ok((r.dot(&r)?, r, next))
            };
            let (mut f, mut r, mut next) = eval(&current)?;
            baseline[t - 1] = f;
            let mut step_size = lr;
            let coef = self.schedule.eps_coefficient(t)?;
            for it in 0..iters {
                // ∂f/∂eps_null = 2 r · coef · (−s)
                let d_eps = r.scale((-2.0 * s * coef) as f32)?;
                let ctx = Tensor::new(vec![1, dt], current.clone())?;
                let g = self.denoiser.vjp(&z, t, &ctx, &[], &d_eps)?.d_context;
                let norm = g.norm_l2();
                if it == 0 {
                    gradient_norm[t - 1] = norm;
                }
                if norm == 0.0 {
                    break;
                }
                let cand: Vec<f32> = current
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &d)| (e as f64 - step_size * d as f64) as f32)
                    .collect();
                let (fc, rc, nc) = eval(&cand)?;
                if fc < f {
                    current = cand;
                    f = fc;
                    r = rc;
                    next = nc;
                } else {
                    step_size *= 0.5;
                }
            }
            objective[t - 1] = f;
            embeddings[t - 1] = current.clone();
            z = next;
        }
        Ok(NullTextResult {
            embeddings,
            baseline,
            objective,
            gradient_norm,
            z0: z,
        })
    }
}
