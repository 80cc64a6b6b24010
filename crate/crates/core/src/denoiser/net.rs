use super::layers::*;
use super::weights::{DenoiserConfig, Weights};
use super::{
    BlockRole, CrossAttentionEnergy, CrossMapView, LayerInfo, LayerSelector, LayerTrace,
    OverrideAction, StepTrace, VariableClass, VariableOverride,
};
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Tensor};

/// The U-Net with immutable weights. Passes only read `self`, so one
/// instance can serve concurrent callers.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    weights: Weights,
}

/// Output of [`Denoiser::energy_gradient`].
#[derive(Clone, Debug)]
pub struct EnergyGradient {
    pub eps: Tensor,
    pub energy: f64,
    /// `∂energy/∂z`, shaped like the latent.
    pub gradient: Tensor,
}

/// Output of [`Denoiser::vjp`].
#[derive(Clone, Debug)]
pub struct Vjp {
    pub eps: Tensor,
    pub d_latent: Tensor,
    pub d_context: Tensor,
}

type Slot<'o> = Option<&'o OverrideAction<'o>>;

#[derive(Default)]
struct ResolvedOverrides<'o> {
    // [self_map, cross_map, self_out] per layer
    slots: Vec<[Slot<'o>; 3]>,
}

fn class_slot(class: VariableClass) -> usize {
    match class {
        VariableClass::SelfMap => 0,
        VariableClass::CrossMap => 1,
        VariableClass::SelfOut => 2,
    }
}

impl<'o> ResolvedOverrides<'o> {
    fn new(overrides: &'o [VariableOverride<'o>], layers: usize) -> Result<Self> {
        let mut slots: Vec<[Slot<'o>; 3]> = vec![[None, None, None]; layers];
        for ov in overrides {
            let targets: Vec<usize> = match ov.layer {
                LayerSelector::All => (0..layers).collect(),
                LayerSelector::Index(i) if i < layers => vec![i],
                LayerSelector::Index(i) => {
                    return Err(Error::OutOfRange {
                        what: "attention layer",
                        index: i,
                        len: layers,
                    })
                }
            };
            for l in targets {
                let slot = &mut slots[l][class_slot(ov.class)];
                if slot.is_some() {
                    return Err(Error::invalid(format!(
                        "conflicting {:?} overrides at layer {l}",
                        ov.class
                    )));
                }
                *slot = Some(&ov.action);
            }
        }
        Ok(Self { slots })
    }

    fn get(&self, layer: usize, class: VariableClass) -> Slot<'o> {
        self.slots[layer][class_slot(class)]
    }
}

fn apply_override(slot: Slot<'_>, class: VariableClass, live: &Tensor) -> Result<Option<Tensor>> {
    match slot {
        None => Ok(None),
        Some(OverrideAction::Replace(v)) => {
            v.ensure_shape("variable override", live.shape())?;
            Ok(Some((*v).clone()))
        }
        Some(OverrideAction::Blend(b)) => {
            let out = b.apply(class, live)?;
            out.ensure_shape("variable blend", live.shape())?;
            Ok(Some(out))
        }
    }
}

fn override_vjp(slot: Slot<'_>, class: VariableClass, live: &Tensor, d: Tensor) -> Result<Tensor> {
    match slot {
        None => Ok(d),
        Some(OverrideAction::Replace(_)) => Ok(Tensor::zeros(live.shape().to_vec())),
        Some(OverrideAction::Blend(b)) => b.vjp(class, live, &d),
    }
}

struct BlockTape {
    info: LayerInfo,
    prefix: String,
    pre1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    m_live: Tensor,
    m_eff: Option<Tensor>,
    phi_live: Tensor,
    qc: Tensor,
    kc: Tensor,
    vc: Tensor,
    a_live: Tensor,
    a_eff: Option<Tensor>,
}

impl BlockTape {
    fn self_map(&self) -> &Tensor {
        self.m_eff.as_ref().unwrap_or(&self.m_live)
    }
    fn cross_map(&self) -> &Tensor {
        self.a_eff.as_ref().unwrap_or(&self.a_live)
    }
}

struct Pass {
    eps: Tensor,
    trace: Option<StepTrace>,
    blocks: Vec<BlockTape>,
    latent_shape: [usize; 3],
}

impl Denoiser {
    /// Builds a network with freshly initialised weights.
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        let weights = Weights::init(&config)?;
        Ok(Self { config, weights })
    }

    pub fn with_weights(config: DenoiserConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn layer_count(&self) -> usize {
        2 * self.config.levels - 1
    }

    /// Attention layer geometry for an `height × width` latent.
    pub fn layer_infos(&self, height: usize, width: usize) -> Result<Vec<LayerInfo>> {
        let m = self.config.spatial_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("latent extents must be positive multiples of {m}"),
            });
        }
        let l = self.config.levels;
        Ok(self
            .config
            .blocks()
            .into_iter()
            .enumerate()
            .map(|(index, (_, level))| {
                let role = if index < l - 1 {
                    BlockRole::Encoder
                } else if index == l - 1 {
                    BlockRole::Middle
                } else {
                    BlockRole::Decoder
                };
                LayerInfo {
                    index,
                    level,
                    role,
                    h: height >> (level + 1),
                    w: width >> (level + 1),
                    channels: self.config.channels[level],
                }
            })
            .collect())
    }

    fn check_inputs(&self, z: &Tensor, context: &Tensor) -> Result<Vec<LayerInfo>> {
        let (h, w, c) = z.dims3()?;
        if c != self.config.image_channels {
            return Err(Error::ShapeMismatch {
                context: "latent channels",
                expected: vec![h, w, self.config.image_channels],
                got: z.shape().to_vec(),
            });
        }
        let (_, dt) = context.dims2()?;
        if dt != self.config.text_dim || context.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                context: "conditioning tokens",
                expected: vec![context.shape()[0].max(1), self.config.text_dim],
                got: context.shape().to_vec(),
            });
        }
        z.ensure_finite("denoiser input")?;
        self.layer_infos(h, w)
    }

    /// Predicted noise for `z` at step `t`, optionally with a trace of every
    /// attention variable.
    pub fn predict_noise(
        &self,
        z: &Tensor,
        t: usize,
        context: &Tensor,
        record: bool,
    ) -> Result<(Tensor, Option<StepTrace>)> {
        self.predict_noise_with_overrides(z, t, context, &[], record)
    }

    pub fn predict_noise_with_overrides(
        &self,
        z: &Tensor,
        t: usize,
        context: &Tensor,
        overrides: &[VariableOverride<'_>],
        record: bool,
    ) -> Result<(Tensor, Option<StepTrace>)> {
        let pass = self.forward(z, t, context, overrides, record, false)?;
        Ok((pass.eps, pass.trace))
    }

    /// `∂energy/∂z` by reverse-mode propagation through the attention
    /// layers, together with the noise prediction of the same pass.
    pub fn energy_gradient(
        &self,
        z: &Tensor,
        t: usize,
        context: &Tensor,
        energy: &dyn CrossAttentionEnergy,
        overrides: &[VariableOverride<'_>],
    ) -> Result<EnergyGradient> {
        if let Some(k) = energy.token() {
            if k >= context.shape().first().copied().unwrap_or(0) {
                return Err(Error::OutOfRange {
                    what: "energy token",
                    index: k,
                    len: context.shape()[0],
                });
            }
        }
        let pass = self.forward(z, t, context, overrides, false, true)?;
        let views: Vec<CrossMapView<'_>> = pass
            .blocks
            .iter()
            .map(|b| CrossMapView {
                layer: b.info,
                map: b.cross_map(),
            })
            .collect();
        let (value, grads) = energy.evaluate(&views)?;
        if grads.len() != pass.blocks.len() {
            return Err(Error::invalid("energy returned wrong number of map gradients"));
        }
        for (g, b) in grads.iter().zip(&pass.blocks) {
            g.ensure_shape("energy map gradient", b.cross_map().shape())?;
        }
        let seeds: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
        let resolved = ResolvedOverrides::new(overrides, self.layer_count())?;
        let (gradient, _) = self.backward(&pass, &resolved, None, &seeds, context)?;
        Ok(EnergyGradient {
            eps: pass.eps,
            energy: value,
            gradient,
        })
    }

    /// Pulls a cotangent on the noise prediction back to the latent and the
    /// conditioning tokens.
    pub fn vjp(
        &self,
        z: &Tensor,
        t: usize,
        context: &Tensor,
        overrides: &[VariableOverride<'_>],
        d_eps: &Tensor,
    ) -> Result<Vjp> {
        d_eps.ensure_shape("eps cotangent", z.shape())?;
        let pass = self.forward(z, t, context, overrides, false, true)?;
        let resolved = ResolvedOverrides::new(overrides, self.layer_count())?;
        let seeds = vec![None; pass.blocks.len()];
        let (d_latent, d_context) = self.backward(&pass, &resolved, Some(d_eps), &seeds, context)?;
        Ok(Vjp {
            eps: pass.eps,
            d_latent,
            d_context,
        })
    }

    fn time_features(&self, t: usize) -> Result<Tensor> {
        let td = self.config.time_dim;
        let e = Tensor::from_parts(vec![1, td], timestep_embedding(t, td));
        let mut pre = e.matmul(self.weights.req("time.w"))?;
        add_row_bias(&mut pre, self.weights.req("time.b").data());
        Ok(silu(&pre))
    }

    fn forward(
        &self,
        z: &Tensor,
        t: usize,
        context: &Tensor,
        overrides: &[VariableOverride<'_>],
        record: bool,
        keep_tape: bool,
    ) -> Result<Pass> {
        let infos = self.check_inputs(z, context)?;
        let resolved = ResolvedOverrides::new(overrides, infos.len())?;
        let (hh, ww, c_img) = z.dims3()?;
        let w = &self.weights;
        let temb = self.time_features(t)?;
        let l = self.config.levels;
        let names = self.config.blocks();

        let mut h = patchify(z)?.matmul(w.req("in.w"))?;
        add_row_bias(&mut h, w.req("in.b").data());

        let mut blocks = Vec::with_capacity(infos.len());
        let mut traces = Vec::with_capacity(infos.len());
        let mut skips = Vec::with_capacity(l - 1);
        for (idx, info) in infos.iter().enumerate() {
            let prefix = &names[idx].0;
            if info.role == BlockRole::Decoder {
                let lv = info.level;
                let coarse = &infos[idx - 1];
                let up = upsample2(&h, coarse.h, coarse.w).matmul(w.req(&format!("up{lv}.w")))?;
                let skip: Tensor = skips.pop().expect("encoder skip for every decoder block");
                h = up;
                add_assign(&mut h, &skip);
            }
            let (out, tape) = self.block(prefix, *info, h, &temb, context, &resolved)?;
            h = out;
            if record {
                traces.push(LayerTrace {
                    info: *info,
                    self_map: tape.self_map().clone(),
                    cross_map: tape.cross_map().clone(),
                    self_out: self.effective_phi(&tape, &resolved)?,
                });
            }
            if keep_tape {
                blocks.push(tape);
            }
            if info.role == BlockRole::Encoder {
                skips.push(h.clone());
                let lv = info.level;
                h = avg_pool2(&h, info.h, info.w).matmul(w.req(&format!("down{lv}.w")))?;
            }
        }

        let mut o = h.matmul(w.req("out.w"))?;
        add_row_bias(&mut o, w.req("out.b").data());
        let eps = unpatchify(&o, hh, ww, c_img);
        eps.ensure_finite("denoiser output")?;
        let trace = record.then(|| StepTrace {
            t,
            latent: z.clone(),
            layers: traces,
        });
        Ok(Pass {
            eps,
            trace,
            blocks,
            latent_shape: [hh, ww, c_img],
        })
    }

    fn effective_phi(&self, tape: &BlockTape, resolved: &ResolvedOverrides<'_>) -> Result<Tensor> {
        let slot = resolved.get(tape.info.index, VariableClass::SelfOut);
        Ok(apply_override(slot, VariableClass::SelfOut, &tape.phi_live)?
            .unwrap_or_else(|| tape.phi_live.clone()))
    }

    fn block(
        &self,
        prefix: &str,
        info: LayerInfo,
        x: Tensor,
        temb: &Tensor,
        context: &Tensor,
        resolved: &ResolvedOverrides<'_>,
    ) -> Result<(Tensor, BlockTape)> {
        let w = &self.weights;
        let p = |s: &str| format!("{prefix}.{s}");
        let (gh, gw) = (info.h, info.w);
        let scale = 1.0 / (self.config.head_dim as f32).sqrt();

        // residual conv branch
        let mut pre1 = conv3x3(&x, gh, gw, w.req(&p("res.conv1.w")), w.req(&p("res.conv1.b")).data());
        let tb = temb.matmul(w.req(&p("res.time.w")))?;
        add_row_bias(&mut pre1, tb.data());
        let a1 = silu(&pre1);
        let r = conv3x3(&a1, gh, gw, w.req(&p("res.conv2.w")), w.req(&p("res.conv2.b")).data());
        let mut h = x;
        add_assign(&mut h, &r);

        // self-attention
        let q = h.matmul(w.req(&p("self.q")))?;
        let k = h.matmul(w.req(&p("self.k")))?;
        let v = h.matmul(w.req(&p("self.v")))?;
        let m_live = softmax_rows(&q.matmul_nt(&k)?.scale(scale)?)?;
        let m_eff = apply_override(
            resolved.get(info.index, VariableClass::SelfMap),
            VariableClass::SelfMap,
            &m_live,
        )?;
        let phi_live = m_eff.as_ref().unwrap_or(&m_live).matmul(&v)?;
        let phi_eff = apply_override(
            resolved.get(info.index, VariableClass::SelfOut),
            VariableClass::SelfOut,
            &phi_live,
        )?;
        let attn = phi_eff.as_ref().unwrap_or(&phi_live).matmul(w.req(&p("self.o")))?;
        add_assign(&mut h, &attn);

        // cross-attention
        let qc = h.matmul(w.req(&p("cross.q")))?;
        let kc = context.matmul(w.req(&p("cross.k")))?;
        let vc = context.matmul(w.req(&p("cross.v")))?;
        let a_live = softmax_rows(&qc.matmul_nt(&kc)?.scale(scale)?)?;
        let a_eff = apply_override(
            resolved.get(info.index, VariableClass::CrossMap),
            VariableClass::CrossMap,
            &a_live,
        )?;
        let oc = a_eff.as_ref().unwrap_or(&a_live).matmul(&vc)?;
        let attn = oc.matmul(w.req(&p("cross.o")))?;
        add_assign(&mut h, &attn);
        h.ensure_finite("attention block")?;

        let tape = BlockTape {
            info,
            prefix: prefix.to_string(),
            pre1,
            q,
            k,
            v,
            m_live,
            m_eff,
            phi_live,
            qc,
            kc,
            vc,
            a_live,
            a_eff,
        };
        Ok((h, tape))
    }

    fn backward(
        &self,
        pass: &Pass,
        resolved: &ResolvedOverrides<'_>,
        d_eps: Option<&Tensor>,
        cross_seeds: &[Option<&Tensor>],
        context: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let w = &self.weights;
        let [hh, ww, c_img] = pass.latent_shape;
        let n0 = (hh / 2) * (ww / 2);
        let c0 = self.config.channels[0];
        let mut d_context = Tensor::zeros(context.shape().to_vec());

        let mut dh = match d_eps {
            Some(d) => patchify(d)?.matmul_nt(w.req("out.w"))?,
            None => Tensor::zeros(vec![n0, c0]),
        };
        let mut d_skips: Vec<Tensor> = Vec::new();
        for tape in pass.blocks.iter().rev() {
            let info = tape.info;
            if info.role == BlockRole::Encoder {
                let lv = info.level;
                let d_pooled = dh.matmul_nt(w.req(&format!("down{lv}.w")))?;
                dh = avg_pool2_backward(&d_pooled, info.h, info.w);
                let skip = d_skips.pop().expect("decoder cotangent for every skip");
                add_assign(&mut dh, &skip);
            }
            dh = self.block_backward(
                tape,
                resolved,
                dh,
                cross_seeds[info.index],
                &mut d_context,
            )?;
            if info.role == BlockRole::Decoder {
                let lv = info.level;
                d_skips.push(dh.clone());
                let d_up = dh.matmul_nt(w.req(&format!("up{lv}.w")))?;
                dh = upsample2_backward(&d_up, info.h / 2, info.w / 2);
            }
        }
        let d_p = dh.matmul_nt(w.req("in.w"))?;
        let d_latent = unpatchify(&d_p, hh, ww, c_img);
        d_latent.ensure_finite("latent gradient")?;
        d_context.ensure_finite("context gradient")?;
        Ok((d_latent, d_context))
    }

    fn block_backward(
        &self,
        tape: &BlockTape,
        resolved: &ResolvedOverrides<'_>,
        dh3: Tensor,
        cross_seed: Option<&Tensor>,
        d_context: &mut Tensor,
    ) -> Result<Tensor> {
        let w = &self.weights;
        let p = |s: &str| format!("{}.{s}", tape.prefix);
        let (gh, gw) = (tape.info.h, tape.info.w);
        let scale = 1.0 / (self.config.head_dim as f32).sqrt();
        let layer = tape.info.index;

        // cross-attention
        let mut dh2 = dh3.clone();
        let d_oc = dh3.matmul_nt(w.req(&p("cross.o")))?;
        let mut d_a = d_oc.matmul_nt(&tape.vc)?;
        if let Some(seed) = cross_seed {
            add_assign(&mut d_a, seed);
        }
        let d_vc = tape.cross_map().matmul_tn(&d_oc)?;
        let d_a_live = override_vjp(
            resolved.get(layer, VariableClass::CrossMap),
            VariableClass::CrossMap,
            &tape.a_live,
            d_a,
        )?;
        let d_logits = softmax_backward(&tape.a_live, &d_a_live).scale(scale)?;
        let d_qc = d_logits.matmul(&tape.kc)?;
        let d_kc = d_logits.matmul_tn(&tape.qc)?;
        add_assign(&mut dh2, &d_qc.matmul_nt(w.req(&p("cross.q")))?);
        add_assign(d_context, &d_kc.matmul_nt(w.req(&p("cross.k")))?);
        add_assign(d_context, &d_vc.matmul_nt(w.req(&p("cross.v")))?);

        // self-attention
        let mut dh1 = dh2.clone();
        let d_phi_eff = dh2.matmul_nt(w.req(&p("self.o")))?;
        let d_phi = override_vjp(
            resolved.get(layer, VariableClass::SelfOut),
            VariableClass::SelfOut,
            &tape.phi_live,
            d_phi_eff,
        )?;
        let d_m = d_phi.matmul_nt(&tape.v)?;
        let d_v = tape.self_map().matmul_tn(&d_phi)?;
        let d_m_live = override_vjp(
            resolved.get(layer, VariableClass::SelfMap),
            VariableClass::SelfMap,
            &tape.m_live,
            d_m,
        )?;
        let d_logits = softmax_backward(&tape.m_live, &d_m_live).scale(scale)?;
        let d_q = d_logits.matmul(&tape.k)?;
        let d_k = d_logits.matmul_tn(&tape.q)?;
        add_assign(&mut dh1, &d_q.matmul_nt(w.req(&p("self.q")))?);
        add_assign(&mut dh1, &d_k.matmul_nt(w.req(&p("self.k")))?);
        add_assign(&mut dh1, &d_v.matmul_nt(w.req(&p("self.v")))?);

        // residual conv branch
        let mut dx = dh1.clone();
        let d_a1 = conv3x3_backward(&dh1, gh, gw, w.req(&p("res.conv2.w")));
        let d_pre1 = silu_backward(&tape.pre1, &d_a1);
        add_assign(&mut dx, &conv3x3_backward(&d_pre1, gh, gw, w.req(&p("res.conv1.w"))));
        Ok(dx)
    }
}
