//! On-disk fixtures for command-level tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use latentswap::numerics::{SeededRng, Tensor};
use latentswap::pipeline::{default_prompt, write_pnm, ConceptSpec, ImageBuffer};

pub const TOKENS: usize = 4;
pub const PROMPT_SEED: u64 = 1;

/// Smooth colour ramps plus seeded noise.
pub fn test_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let base = match c {
                    0 => 255.0 * i as f64 / h as f64,
                    1 => 255.0 * j as f64 / w as f64,
                    _ => 128.0 + 60.0 * ((i + j) as f64 * 0.3).sin(),
                };
                data.push((base + 20.0 * rng.normal()).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(h, w, 3, data).unwrap()
}

/// Filled axis-aligned rectangle `rows × cols`.
pub fn rect_mask(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> ImageBuffer {
    let data = (0..h * w)
        .map(|p| if rows.contains(&(p / w)) && cols.contains(&(p % w)) { 255 } else { 0 })
        .collect();
    ImageBuffer::new(h, w, 1, data).unwrap()
}

pub fn source_row(token: usize) -> Tensor {
    let p = default_prompt(PROMPT_SEED, TOKENS, 16);
    Tensor::new(vec![16], p.row(token).to_vec()).unwrap()
}

pub fn novel_row(seed: u64) -> Tensor {
    SeededRng::new(seed).normal_tensor(vec![16], 1.0)
}

/// Scratch directory with an image, masks, concepts, and a base config.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(h: usize, w: usize, config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Self { dir };
        ws.put("image.ppm", &write_pnm(&test_image(h, w, 7)).unwrap());
        ws.put("empty.pgm", &write_pnm(&rect_mask(h, w, 0..0, 0..0)).unwrap());
        ws.put("left.pgm", &write_pnm(&rect_mask(h, w, h / 4..h / 2, w / 8..w / 3)).unwrap());
        ws.put("right.pgm", &write_pnm(&rect_mask(h, w, h / 2..3 * h / 4, 2 * w / 3..7 * w / 8)).unwrap());
        ws.put("identity.concept", &ConceptSpec::new("same", 1, source_row(1)).unwrap().to_bytes());
        ws.put("novel.concept", &ConceptSpec::new("novel", 1, novel_row(99)).unwrap().to_bytes());
        ws.put("other.concept", &ConceptSpec::new("other", 2, novel_row(98)).unwrap().to_bytes());
        ws.put("run.cfg", format!("image=image.ppm\noutput=out.ppm\n{config}").as_bytes());
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn put(&self, name: &str, bytes: &[u8]) {
        std::fs::write(self.path(name), bytes).unwrap();
    }

    pub fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    /// Runs the binary on `run.cfg` with extra `--key value` overrides.
    pub fn cli(&self, command: &str, overrides: &[&str]) -> Output {
        std::process::Command::new(env!("CARGO_BIN_EXE_latentswap"))
            .arg(command)
            .arg("--config")
            .arg(self.path("run.cfg"))
            .args(overrides)
            .output()
            .unwrap()
    }
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn exists(p: &Path) -> bool {
    p.is_file()
}
