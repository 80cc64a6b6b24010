use crate::adapt::{extract_shape, ShapeConfig};
use crate::denoiser::UNetTrace;
use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, Tensor};

use super::codec::ImageBuffer;

pub const PC_ITERATIONS: usize = 50;
pub const PC_TOLERANCE: f64 = 1e-8;

/// Leading eigenvector of the sample covariance of `n × d` row-major
/// samples, by power iteration. The largest-magnitude entry is positive.
/// `None` when the samples have (numerically) no variance.
pub fn first_principal_component(samples: &[f64], d: usize) -> Option<Vec<f64>> {
    if d == 0 || samples.is_empty() || samples.len() % d != 0 {
        return None;
    }
    let n = samples.len() / d;
    let mut mean = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut cov = vec![0.0; d * d];
    for row in samples.chunks_exact(d) {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += da * (row[b] - mean[b]) / n as f64;
            }
        }
    }
    let scale = (0..d).map(|i| cov[i * d + i]).sum::<f64>();
    if !(scale > 1e-12) {
        return None;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Start from the covariance column of largest norm: never orthogonal
    // to the leading eigenvector unless the matrix is zero.
    let mut v: Vec<f64> = (0..d)
        .map(|c| (0..d).map(|r| cov[r * d + c]).collect::<Vec<_>>())
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))?;
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..PC_ITERATIONS {
        let mut next: Vec<f64> = (0..d).map(|r| (0..d).map(|c| cov[r * d + c] * v[c]).sum()).collect();
        let nn = norm(&next);
        if !(nn > 0.0) {
            return None;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta <= PC_TOLERANCE {
            break;
        }
    }
    let lead = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs()))?;
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some(v)
}

fn to_gray(values: &[f64], h: usize, w: usize) -> Result<ImageBuffer> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range > 1e-12 {
        values.iter().map(|v| ((v - lo) / range * 255.0).round() as u8).collect()
    } else {
        vec![128; values.len()]
    };
    ImageBuffer::new(h, w, 1, data)
}

/// Element-wise mean of equally shaped latents.
pub fn step_average(latents: &[Tensor]) -> Result<Tensor> {
    let first = latents.first().ok_or_else(|| Error::invalid("no latents to average"))?;
    let mut acc = vec![0f64; first.len()];
    for z in latents {
        z.ensure_shape("averaged latent", first.shape())?;
        acc.iter_mut().zip(z.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let n = latents.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Projection of each pixel of an `[H, W, C]` latent onto its first
/// principal component across channels, as grayscale. A latent without
/// variance maps to uniform mid-gray.
pub fn pc_image(latent: &Tensor) -> Result<ImageBuffer> {
    let (h, w, c) = latent.dims3()?;
    let x: Vec<f64> = latent.data().iter().map(|&v| v as f64).collect();
    let Some(pc) = first_principal_component(&x, c) else {
        return ImageBuffer::new(h, w, 1, vec![128; h * w]);
    };
    let proj: Vec<f64> = x.chunks_exact(c).map(|p| p.iter().zip(&pc).map(|(a, b)| a * b).sum()).collect();
    to_gray(&proj, h, w)
}

#[derive(Clone, Debug)]
pub struct Heatmap {
    pub layer: usize,
    pub token: usize,
    pub image: ImageBuffer,
}

/// Per-layer cross-attention maps averaged over steps, `[N_q, T_tok]`.
fn averaged_cross_maps(trace: &UNetTrace) -> Result<Vec<(usize, usize, Tensor)>> {
    let first = trace.steps.first().ok_or_else(|| Error::invalid("empty trace"))?;
    first
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let maps: Vec<Tensor> = trace.steps.iter().map(|s| s.layers[l].cross_map.clone()).collect();
            Ok((layer.info.h, layer.info.w, step_average(&maps)?))
        })
        .collect()
}

fn column(map: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, tokens) = map.dims2()?;
    Tensor::new(vec![h, w], (0..h * w).map(|q| map.data()[q * tokens + k]).collect())
}

/// One grayscale heatmap per layer and token, upsampled to `h × w`.
pub fn cross_heatmaps(trace: &UNetTrace, h: usize, w: usize) -> Result<Vec<Heatmap>> {
    let mut out = Vec::new();
    for (l, (lh, lw, map)) in averaged_cross_maps(trace)?.into_iter().enumerate() {
        let (_, tokens) = map.dims2()?;
        for k in 0..tokens {
            let up = resize_bilinear(&column(&map, k, lh, lw)?, h, w)?;
            let values: Vec<f64> = up.data().iter().map(|&v| v as f64).collect();
            out.push(Heatmap {
                layer: l,
                token: k,
                image: to_gray(&values, h, w)?,
            });
        }
    }
    Ok(out)
}

/// Hard shape of every token from the step- and layer-averaged attention
/// at `h × w`, as a 0/255 mask.
pub fn hard_shapes(trace: &UNetTrace, h: usize, w: usize, config: &ShapeConfig) -> Result<Vec<ImageBuffer>> {
    let layers = averaged_cross_maps(trace)?;
    let tokens = layers[0].2.dims2()?.1;
    let mut merged = vec![0f64; h * w * tokens];
    for (lh, lw, map) in &layers {
        for k in 0..tokens {
            let up = resize_bilinear(&column(map, k, *lh, *lw)?, h, w)?;
            for (q, &v) in up.data().iter().enumerate() {
                merged[q * tokens + k] += v as f64 / layers.len() as f64;
            }
        }
    }
    let merged = Tensor::new(vec![h * w, tokens], merged.into_iter().map(|v| v as f32).collect())?;
    (0..tokens)
        .map(|k| {
            let s = extract_shape(&merged, k, h, w, &config.hard())?;
            ImageBuffer::new(h, w, 1, s.field.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect())
        })
        .collect()
}
