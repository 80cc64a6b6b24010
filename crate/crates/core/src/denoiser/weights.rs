use std::collections::HashMap;
use std::io::{BufRead, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{encode_tensor, read_tensor, write_atomic};
use crate::numerics::{SeededRng, Tensor};

/// Architecture and seed of the denoising U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    /// Query/key width `d`; attention logits are scaled by `1/√d`.
    pub head_dim: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub image_channels: usize,
    pub weight_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            channels: vec![16, 32],
            head_dim: 16,
            text_dim: 16,
            time_dim: 32,
            image_channels: 3,
            weight_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("denoiser needs at least one level"));
        }
        if self.channels.len() != self.levels {
            return Err(Error::invalid(format!(
                "{} channel widths given for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.contains(&0) || self.head_dim == 0 || self.text_dim == 0 {
            return Err(Error::invalid("zero-width layer in denoiser config"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding width must be even and positive"));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::invalid(format!(
                "unsupported image channel count {}",
                self.image_channels
            )));
        }
        Ok(())
    }

    /// Latent extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Block name prefixes with their level, in forward order.
    pub(crate) fn blocks(&self) -> Vec<(String, usize)> {
        let l = self.levels;
        let mut out: Vec<(String, usize)> = (0..l - 1).map(|i| (format!("enc{i}"), i)).collect();
        out.push(("mid".into(), l - 1));
        out.extend((0..l - 1).rev().map(|i| (format!("dec{i}"), i)));
        out
    }

    /// `(name, shape, std)` for every tensor, in manifest order.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>, f64)> {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let (c_img, td, dt, d) = (
            self.image_channels,
            self.time_dim,
            self.text_dim,
            self.head_dim,
        );
        let c0 = self.channels[0];
        let mut v: Vec<(String, Vec<usize>, f64)> = vec![
            ("in.w".into(), vec![4 * c_img, c0], he(4 * c_img)),
            ("in.b".into(), vec![c0], 0.0),
            ("time.w".into(), vec![td, td], he(td)),
            ("time.b".into(), vec![td], 0.0),
        ];
        let block = |v: &mut Vec<(String, Vec<usize>, f64)>, p: &str, c: usize| {
            v.push((format!("{p}.res.conv1.w"), vec![3, 3, c, c], he(9 * c)));
            v.push((format!("{p}.res.conv1.b"), vec![c], 0.0));
            v.push((format!("{p}.res.time.w"), vec![td, c], 0.5 * he(td)));
            v.push((format!("{p}.res.conv2.w"), vec![3, 3, c, c], 0.5 * he(9 * c)));
            v.push((format!("{p}.res.conv2.b"), vec![c], 0.0));
            v.push((format!("{p}.self.q"), vec![c, d], 0.5 * he(c)));
            v.push((format!("{p}.self.k"), vec![c, d], 0.5 * he(c)));
            v.push((format!("{p}.self.v"), vec![c, c], he(c)));
            v.push((format!("{p}.self.o"), vec![c, c], 0.5 * he(c)));
            v.push((format!("{p}.cross.q"), vec![c, d], 0.5 * he(c)));
            v.push((format!("{p}.cross.k"), vec![dt, d], he(dt)));
            v.push((format!("{p}.cross.v"), vec![dt, c], he(dt)));
            v.push((format!("{p}.cross.o"), vec![c, c], 0.5 * he(c)));
        };
        let l = self.levels;
        for i in 0..l - 1 {
            block(&mut v, &format!("enc{i}"), self.channels[i]);
            let (a, b) = (self.channels[i], self.channels[i + 1]);
            v.push((format!("down{i}.w"), vec![a, b], he(a)));
        }
        block(&mut v, "mid", self.channels[l - 1]);
        for i in (0..l - 1).rev() {
            let (a, b) = (self.channels[i], self.channels[i + 1]);
            v.push((format!("up{i}.w"), vec![b, a], he(b)));
            block(&mut v, &format!("dec{i}"), self.channels[i]);
        }
        v.push(("out.w".into(), vec![c0, 4 * c_img], OUTPUT_GAIN * he(c0)));
        v.push(("out.b".into(), vec![4 * c_img], 0.0));
        v
    }
}

/// Scale of the noise-prediction head relative to He initialisation.
pub(crate) const OUTPUT_GAIN: f64 = 0.1;

/// Named parameter tensors in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

const WEIGHTS_HEADER: &str = "LSWP-WEIGHTS";

impl Weights {
    /// He-scaled Gaussian draws from a [`SeededRng`]; biases start at zero.
    pub fn init(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.weight_seed);
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape, std)| {
                let t = if std == 0.0 {
                    Tensor::zeros(shape)
                } else {
                    rng.normal_tensor(shape, std)
                };
                (name, t)
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub(crate) fn req(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("weight `{name}` missing from validated set"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks names, order, and extents against the config-derived layout.
    pub fn validate(&self, config: &DenoiserConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.entries.len() {
            return Err(Error::format(
                "weights",
                format!("expected {} tensors, found {}", layout.len(), self.entries.len()),
            ));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(&self.entries) {
            if name != n {
                return Err(Error::format("weights", format!("expected `{name}`, found `{n}`")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "weights",
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Manifest (`LSWP-WEIGHTS <count>` then one `name d0,d1,…` line per
    /// tensor) followed by the tensors as `LSWP` records in the same order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{WEIGHTS_HEADER} {}\n", self.entries.len()).into_bytes();
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.extend(format!("{name} {}\n", dims.join(",")).bytes());
        }
        for (_, t) in &self.entries {
            out.extend(encode_tensor(t));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("weights", r.to_string());
        let mut cursor = bytes;
        let mut line = String::new();
        cursor
            .read_line(&mut line)
            .map_err(|e| bad(&e.to_string()))?;
        let count: usize = line
            .trim_end()
            .strip_prefix(WEIGHTS_HEADER)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("missing manifest header"))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            line.clear();
            cursor
                .read_line(&mut line)
                .map_err(|e| bad(&e.to_string()))?;
            let (name, dims) = line
                .trim_end()
                .split_once(' ')
                .ok_or_else(|| bad("malformed manifest line"))?;
            let shape = if dims.is_empty() {
                vec![]
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| bad("bad extent")))
                    .collect::<Result<Vec<_>>>()?
            };
            manifest.push((name.to_string(), shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let t = read_tensor(&mut cursor)?;
            if t.shape() != shape.as_slice() {
                return Err(bad(&format!("record for `{name}` disagrees with manifest")));
            }
            entries.push((name, t));
        }
        let mut rest = Vec::new();
        cursor.read_to_end(&mut rest).map_err(|e| bad(&e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = DenoiserConfig::default();
        let a = Weights::init(&cfg).unwrap();
        let b = Weights::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = Weights::init(&DenoiserConfig {
            weight_seed: 1,
            ..cfg.clone()
        })
        .unwrap();
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn weight_file_round_trip_and_validation() {
        let cfg = DenoiserConfig {
            levels: 1,
            channels: vec![8],
            ..Default::default()
        };
        let w = Weights::init(&cfg).unwrap();
        let back = Weights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        back.validate(&cfg).unwrap();
        assert!(back.validate(&DenoiserConfig::default()).is_err());
        let mut bytes = w.to_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(Weights::from_bytes(&bytes).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig {
            channels: vec![16],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DenoiserConfig {
            image_channels: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
