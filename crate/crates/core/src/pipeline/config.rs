use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapt::ShapeConfig;
use crate::error::{Error, Result};
use crate::masks::{AnnealSchedule, FeatherParams};
use crate::scheduler::{SamplerConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::swap::{SwapSchedule, RECONSTRUCTION_TOLERANCE};

const KEYS: &[&str] = &[
    "adain",
    "anneal-k",
    "beta-end",
    "beta-start",
    "cfg-scale",
    "concept",
    "dilate-extent",
    "feather",
    "feather-radius",
    "feather-sigma",
    "image",
    "invert-refine",
    "invert-tol",
    "manifest",
    "mask",
    "null-iters",
    "null-lr",
    "out-dir",
    "output",
    "prompt",
    "prompt-seed",
    "prompt-tokens",
    "reconstruction",
    "seed",
    "shape-tau",
    "shape-threshold",
    "shape-weight",
    "soft-attention-masks",
    "steps",
    "swap-cross",
    "swap-out",
    "swap-self",
    "swap-z",
    "tolerance",
    "weights",
];

/// Flat `key=value` configuration. Relative paths resolve against `base`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

fn plan_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("plan")?;
    let (n, field) = rest.split_once('.')?;
    let n = n.parse().ok()?;
    matches!(field, "mask" | "concept").then_some((n, field))
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) || plan_key(key).is_some() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key `{key}`")))
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg = Self {
            values: BTreeMap::new(),
            base: base.into(),
        };
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            check_key(k)?;
            if cfg.values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    /// Sets or replaces a key (command-line overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base.join(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn typed<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`"))),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("on" | "true" | "1") => Ok(true),
            Some("off" | "false" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}` must be on or off, got `{v}`"))),
        }
    }

    /// `(mask, concept)` paths of `planN.*` keys in ascending `N`.
    pub fn plans(&self) -> Result<Vec<(PathBuf, PathBuf)>> {
        let mut found: BTreeMap<usize, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
        for k in self.values.keys() {
            if let Some((n, field)) = plan_key(k) {
                let e = found.entry(n).or_default();
                let p = self.path(k);
                if field == "mask" {
                    e.0 = p;
                } else {
                    e.1 = p;
                }
            }
        }
        found
            .into_iter()
            .map(|(n, (m, c))| match (m, c) {
                (Some(m), Some(c)) => Ok((m, c)),
                _ => Err(Error::Config(format!("plan{n} needs both mask and concept"))),
            })
            .collect()
    }
}

/// Typed view of every tunable.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: SamplerConfig,
    pub shape: ShapeConfig,
    pub swap: SwapSchedule,
    pub feather: Option<FeatherParams>,
    pub adain: bool,
    pub soft_attention_masks: bool,
    pub tolerance: f64,
    pub prompt_seed: u64,
    pub prompt_tokens: usize,
}

impl Settings {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let d = SamplerConfig::default();
        let fd = FeatherParams::default();
        let sd = SwapSchedule::default();
        let shape = ShapeConfig {
            threshold: cfg.typed("shape-threshold", ShapeConfig::default().threshold)?,
            tau: cfg.typed("shape-tau", ShapeConfig::default().tau)?,
            ..ShapeConfig::default()
        };
        shape.validate().map_err(|e| Error::Config(e.to_string()))?;
        let feather = cfg
            .flag("feather", true)?
            .then(|| -> Result<FeatherParams> {
                Ok(FeatherParams {
                    extent: cfg.typed("dilate-extent", fd.extent)?,
                    sigma: cfg.typed("feather-sigma", fd.sigma)?,
                    radius: cfg.typed("feather-radius", fd.radius)?,
                })
            })
            .transpose()?;
        if let Some(f) = feather {
            if f.extent % 2 == 0 || !(f.sigma > 0.0) {
                return Err(Error::Config(
                    "dilate-extent must be odd and feather-sigma positive".into(),
                ));
            }
        }
        let s = Self {
            seed: cfg.typed("seed", 0)?,
            steps: cfg.typed("steps", DEFAULT_STEPS)?,
            beta_start: cfg.typed("beta-start", DEFAULT_BETA_START)?,
            beta_end: cfg.typed("beta-end", DEFAULT_BETA_END)?,
            sampler: SamplerConfig {
                cfg_scale: cfg.typed("cfg-scale", d.cfg_scale)?,
                shape_weight: cfg.typed("shape-weight", d.shape_weight)?,
                token: None,
                anneal: AnnealSchedule::new(cfg.typed("anneal-k", d.anneal.steps)?),
                null_iters: cfg.typed("null-iters", d.null_iters)?,
                null_lr: cfg.typed("null-lr", d.null_lr)?,
                invert_refine: cfg.typed("invert-refine", d.invert_refine)?,
                invert_tol: cfg.typed("invert-tol", d.invert_tol)?,
            },
            shape,
            swap: SwapSchedule {
                z: cfg.typed("swap-z", sd.z)?,
                cross_map: cfg.typed("swap-cross", sd.cross_map)?,
                self_map: cfg.typed("swap-self", sd.self_map)?,
                self_out: cfg.typed("swap-out", sd.self_out)?,
            },
            feather,
            adain: cfg.flag("adain", true)?,
            soft_attention_masks: cfg.flag("soft-attention-masks", true)?,
            tolerance: cfg.typed("tolerance", RECONSTRUCTION_TOLERANCE)?,
            prompt_seed: cfg.typed("prompt-seed", 1)?,
            prompt_tokens: cfg.typed("prompt-tokens", 4)?,
        };
        if s.prompt_tokens == 0 {
            return Err(Error::Config("prompt-tokens must be positive".into()));
        }
        if !(s.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(s)
    }

    /// Every effective setting as manifest entries.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let f = self.feather;
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        vec![
            ("adain".into(), onoff(self.adain)),
            ("anneal-k".into(), self.sampler.anneal.steps.to_string()),
            ("beta-end".into(), self.beta_end.to_string()),
            ("beta-start".into(), self.beta_start.to_string()),
            ("cfg-scale".into(), self.sampler.cfg_scale.to_string()),
            ("dilate-extent".into(), f.map_or("-".into(), |f| f.extent.to_string())),
            ("feather".into(), onoff(f.is_some())),
            ("feather-radius".into(), f.map_or("-".into(), |f| f.radius.to_string())),
            ("feather-sigma".into(), f.map_or("-".into(), |f| f.sigma.to_string())),
            ("invert-refine".into(), self.sampler.invert_refine.to_string()),
            ("invert-tol".into(), self.sampler.invert_tol.to_string()),
            ("null-iters".into(), self.sampler.null_iters.to_string()),
            ("null-lr".into(), self.sampler.null_lr.to_string()),
            ("prompt-seed".into(), self.prompt_seed.to_string()),
            ("prompt-tokens".into(), self.prompt_tokens.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("shape-tau".into(), self.shape.tau.to_string()),
            ("shape-threshold".into(), self.shape.threshold.to_string()),
            ("shape-weight".into(), self.sampler.shape_weight.to_string()),
            ("soft-attention-masks".into(), onoff(self.soft_attention_masks)),
            ("steps".into(), self.steps.to_string()),
            ("swap-cross".into(), self.swap.cross_map.to_string()),
            ("swap-out".into(), self.swap.self_out.to_string()),
            ("swap-self".into(), self.swap.self_map.to_string()),
            ("swap-z".into(), self.swap.z.to_string()),
            ("tolerance".into(), self.tolerance.to_string()),
        ]
    }
}
