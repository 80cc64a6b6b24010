//! Image codec, run configuration, and the end-to-end commands.

pub mod codec;
pub mod concept;
pub mod config;
pub mod inspect;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::{ConditioningSet, Denoiser, DenoiserConfig, Weights};
use crate::error::{Error, Result};
use crate::masks::{feather, load_binary_pgm, SoftMask};
use crate::numerics::io::{encode_tensor, load_tensor, write_atomic};
use crate::numerics::{SeededRng, Tensor};
use crate::scheduler::NoiseSchedule;
use crate::swap::{multi_swap, record_source, swap_generate, SourceTrace, SwapPlan};

pub use codec::{decode, encode, load_pnm, read_pnm, save_pnm, write_pnm, ImageBuffer};
pub use concept::ConceptSpec;
pub use config::{PipelineConfig, Settings};
pub use inspect::{cross_heatmaps, first_principal_component, hard_shapes, pc_image, step_average, Heatmap};
pub use manifest::{sha256_hex, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Invert,
    Swap,
    Insert,
    MultiSwap,
    TraceDump,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Invert => "invert",
            Command::Swap => "swap",
            Command::Insert => "insert",
            Command::MultiSwap => "multi-swap",
            Command::TraceDump => "trace-dump",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Command::Invert,
            Command::Swap,
            Command::Insert,
            Command::MultiSwap,
            Command::TraceDump,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Files written by a run and its manifest.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub outputs: Vec<PathBuf>,
}

/// Seeded source prompt `[tokens, dim]` used when no prompt file is given.
pub fn default_prompt(seed: u64, tokens: usize, dim: usize) -> Tensor {
    SeededRng::new(seed).normal_tensor(vec![tokens, dim], 1.0)
}

fn read_hashed(path: &Path, key: &str, manifest: &mut Manifest) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    manifest.insert_hash(format!("{key}.sha256"), &bytes);
    Ok(bytes)
}

struct Run {
    cfg: PipelineConfig,
    settings: Settings,
    image: ImageBuffer,
    z0: Tensor,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    cond: ConditioningSet,
    manifest: Manifest,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: Command, cfg: &PipelineConfig) -> Result<Self> {
        let settings = Settings::from_config(cfg).map_err(|e| e.at("config"))?;
        let mut manifest = Manifest::new();
        manifest.insert("command", command);
        for (k, v) in settings.manifest_entries() {
            manifest.insert(k, v);
        }
        for (k, v) in cfg.entries() {
            if manifest.get(k).is_none() {
                manifest.insert(k, v);
            }
        }

        let image_path = cfg.require_path("image").map_err(|e| e.at("config"))?;
        let image = read_hashed(&image_path, "image", &mut manifest)
            .and_then(|b| read_pnm(&b))
            .map_err(|e| e.at("load image"))?;
        let z0 = encode(&image);

        let mut dc = DenoiserConfig {
            weight_seed: settings.seed,
            image_channels: image.channels(),
            ..DenoiserConfig::default()
        };
        let denoiser = match cfg.path("weights") {
            Some(p) => {
                let bytes = read_hashed(&p, "weights", &mut manifest).map_err(|e| e.at("load weights"))?;
                let w = Weights::from_bytes(&bytes).map_err(|e| e.at("load weights"))?;
                if let Some(out) = w.get("out.b") {
                    dc.image_channels = out.len() / 4;
                }
                Denoiser::with_weights(dc, w)
            }
            None => Denoiser::new(dc),
        }
        .map_err(|e| e.at("denoiser"))?;
        denoiser
            .layer_infos(image.height(), image.width())
            .map_err(|e| e.at("load image"))?;

        let schedule = NoiseSchedule::linear(settings.steps, settings.beta_start, settings.beta_end)
            .map_err(|e| Error::Config(e.to_string()).at("config"))?;
        settings
            .sampler
            .validate(&schedule)
            .map_err(|e| Error::Config(e.to_string()).at("config"))?;
        settings
            .swap
            .validate(settings.steps)
            .map_err(|e| Error::Config(e.to_string()).at("config"))?;

        let dim = denoiser.config().text_dim;
        let tokens = match cfg.path("prompt") {
            Some(p) => {
                read_hashed(&p, "prompt", &mut manifest).map_err(|e| e.at("load prompt"))?;
                load_tensor(&p).map_err(|e| e.at("load prompt"))?
            }
            None => default_prompt(settings.prompt_seed, settings.prompt_tokens, dim),
        };
        let cond = ConditioningSet::new(tokens, vec![0.0; dim]).map_err(|e| e.at("load prompt"))?;

        Ok(Self {
            cfg: cfg.clone(),
            settings,
            image,
            z0,
            denoiser,
            schedule,
            cond,
            manifest,
            outputs: Vec::new(),
        })
    }

    fn record(&mut self, z0: &Tensor) -> Result<SourceTrace> {
        let tol = self.settings.tolerance;
        let result = record_source(&self.denoiser, &self.schedule, &self.settings.sampler, z0, &self.cond, tol);
        match &result {
            Ok(t) => {
                self.manifest.insert("reconstruction-error", format!("{:e}", t.reconstruction_error));
                self.manifest.insert("tolerance-check", "pass");
            }
            Err(Error::ReconstructionTolerance { error, .. }) => {
                self.manifest.insert("reconstruction-error", format!("{error:e}"));
                self.manifest.insert("tolerance-check", "fail");
            }
            Err(_) => {}
        }
        result.map_err(|e| e.at("record source"))
    }

    fn write(&mut self, key: &str, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes).map_err(|e| e.at("write output"))?;
        self.manifest.insert(format!("{key}.sha256"), sha256_hex(bytes));
        self.outputs.push(path);
        Ok(())
    }

    fn write_image(&mut self, key: &str, path: PathBuf, z: &Tensor) -> Result<()> {
        let bytes = decode(z).and_then(|img| write_pnm(&img)).map_err(|e| e.at("decode"))?;
        self.write(key, path, &bytes)
    }

    fn write_reconstruction(&mut self, z: &Tensor) -> Result<()> {
        if let Some(p) = self.cfg.path("reconstruction") {
            self.write_image("reconstruction", p, z)?;
        }
        Ok(())
    }

    fn load_mask(&mut self, path: &Path, key: &str) -> Result<SoftMask> {
        read_hashed(path, key, &mut self.manifest)?;
        let binary = load_binary_pgm(path)?;
        let dims = binary.dims();
        if dims != (self.image.height(), self.image.width()) {
            return Err(Error::ShapeMismatch {
                context: "mask",
                expected: vec![self.image.height(), self.image.width()],
                got: vec![dims.0, dims.1],
            });
        }
        match self.settings.feather {
            Some(p) => feather(&binary, p),
            None => Ok(SoftMask::from(&binary)),
        }
    }

    fn plan(&mut self, mask: &Path, concept: &Path, key: &str) -> Result<SwapPlan> {
        let mask = self
            .load_mask(mask, &format!("{key}mask"))
            .map_err(|e| e.at("load mask"))?;
        let concept = read_hashed(concept, &format!("{key}concept"), &mut self.manifest)
            .and_then(|b| ConceptSpec::from_bytes(&b))
            .map_err(|e| e.at("load concept"))?;
        let mut plan = SwapPlan::with_concept(mask, &self.cond, concept.token, &concept.rows).map_err(|e| e.at("plan"))?;
        plan.schedule = self.settings.swap;
        plan.sampler = self.settings.sampler;
        plan.adain = self.settings.adain;
        plan.shape = self.settings.shape;
        plan.soft_attention_masks = self.settings.soft_attention_masks;
        Ok(plan)
    }

    fn output(&self) -> Result<PathBuf> {
        self.cfg.require_path("output").map_err(|e| e.at("config"))
    }

    fn invert(&mut self) -> Result<()> {
        let out = self.output()?;
        let z0 = self.z0.clone();
        let trace = self.record(&z0)?;
        self.write("output", out, &encode_tensor(trace.z_t()))?;
        self.write_reconstruction(trace.reconstruction())
    }

    fn swap(&mut self) -> Result<()> {
        let out = self.output()?;
        let mask = self.cfg.require_path("mask").map_err(|e| e.at("config"))?;
        let concept = self.cfg.require_path("concept").map_err(|e| e.at("config"))?;
        let plan = self.plan(&mask, &concept, "")?;
        let z0 = self.z0.clone();
        let trace = self.record(&z0)?;
        let swapped = swap_generate(&self.denoiser, &self.schedule, &trace, &plan).map_err(|e| e.at("swap"))?;
        self.write_image("output", out, &swapped.z0)?;
        self.write_reconstruction(trace.reconstruction())
    }

    fn multi_swap(&mut self) -> Result<()> {
        let out = self.output()?;
        let specs = self.cfg.plans().map_err(|e| e.at("config"))?;
        let mut plans = Vec::with_capacity(specs.len());
        for (i, (mask, concept)) in specs.iter().enumerate() {
            plans.push(self.plan(mask, concept, &format!("plan{i}."))?);
        }
        self.manifest.insert("plans", plans.len());
        let result = multi_swap(&self.denoiser, &self.schedule, &self.z0, &plans, self.settings.tolerance)
            .map_err(|e| e.at("multi-swap"))?;
        for (i, s) in result.stages.iter().enumerate() {
            self.manifest
                .insert(format!("stage{i}.reconstruction-error"), format!("{:e}", s.reconstruction_error));
        }
        if !result.stages.is_empty() {
            self.manifest.insert("tolerance-check", "pass");
        }
        self.write_image("output", out, &result.z0)?;
        if let Some(r) = &result.reconstruction {
            self.write_reconstruction(r)?;
        }
        Ok(())
    }

    fn trace_dump(&mut self) -> Result<()> {
        let dir = self.cfg.require_path("out-dir").map_err(|e| e.at("config"))?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e).at("write output"))?;
        let z0 = self.z0.clone();
        let trace = self.record(&z0)?;
        let (h, w) = (self.image.height(), self.image.width());
        let dump = |e: Error| e.at("trace dump");
        let avg = step_average(&trace.latents).map_err(dump)?;
        let pc = pc_image(&avg).and_then(|i| write_pnm(&i)).map_err(dump)?;
        self.write("pc", dir.join("pc.pgm"), &pc)?;
        for hm in cross_heatmaps(&trace.trace, h, w).map_err(dump)? {
            let bytes = write_pnm(&hm.image).map_err(dump)?;
            let name = format!("heat-l{}-t{}", hm.layer, hm.token);
            self.write(&name, dir.join(format!("{name}.pgm")), &bytes)?;
        }
        for (k, s) in hard_shapes(&trace.trace, h, w, &self.settings.shape)
            .map_err(dump)?
            .iter()
            .enumerate()
        {
            let bytes = write_pnm(s).map_err(dump)?;
            let name = format!("shape-t{k}");
            self.write(&name, dir.join(format!("{name}.pgm")), &bytes)?;
        }
        Ok(())
    }

    fn manifest_path(&self, command: Command) -> Result<PathBuf> {
        if let Some(p) = self.cfg.path("manifest") {
            return Ok(p);
        }
        if command == Command::TraceDump {
            return Ok(self.cfg.require_path("out-dir")?.join("manifest.txt"));
        }
        let mut p = self.output()?.into_os_string();
        p.push(".manifest");
        Ok(p.into())
    }
}

/// Runs one command end to end. Errors carry the failing stage.
pub fn run(command: Command, cfg: &PipelineConfig) -> Result<RunReport> {
    let mut r = Run::new(command, cfg)?;
    let manifest_path = r.manifest_path(command).map_err(|e| e.at("config"))?;
    let result = match command {
        Command::Invert => r.invert(),
        Command::Swap | Command::Insert => r.swap(),
        Command::MultiSwap => r.multi_swap(),
        Command::TraceDump => r.trace_dump(),
    };
    r.manifest.insert("status", if result.is_ok() { "ok" } else { "failed" });
    r.manifest.save(&manifest_path).map_err(|e| e.at("write manifest"))?;
    result?;
    Ok(RunReport {
        manifest: r.manifest,
        manifest_path,
        outputs: r.outputs,
    })
}
