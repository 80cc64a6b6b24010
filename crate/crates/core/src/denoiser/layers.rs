//! Row-major `[tokens, channels]` primitives used by the U-Net and their
//! input-gradients.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            (v * sigmoid(v)) as f32
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// `dy ⊙ silu'(x)`.
pub(crate) fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let v = v as f64;
            let s = sigmoid(v);
            (g as f64 * s * (1.0 + v * (1.0 - s))) as f32
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub(crate) fn add_row_bias(x: &mut Tensor, bias: &[f32]) {
    let cols = bias.len();
    for row in x.data_mut().chunks_exact_mut(cols) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = (*v as f64 + b as f64) as f32;
        }
    }
}

pub(crate) fn add_assign(x: &mut Tensor, y: &Tensor) {
    debug_assert_eq!(x.shape(), y.shape());
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// 3×3 zero-padded convolution on an `h×w` token grid. `weight` is
/// `[3, 3, c_in, c_out]`.
pub(crate) fn conv3x3(x: &Tensor, h: usize, w: usize, weight: &Tensor, bias: &[f32]) -> Tensor {
    let c_in = x.shape()[1];
    let c_out = bias.len();
    let wd = weight.data();
    let xd = x.data();
    let mut out = vec![0f32; h * w * c_out];
    let mut acc = vec![0f64; c_out];
    for i in 0..h {
        for j in 0..w {
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a = b as f64;
            }
            for ky in 0..3 {
                let y = i as isize + ky as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = j as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = &xd[(y as usize * w + xx as usize) * c_in..][..c_in];
                    let tap = &wd[(ky * 3 + kx) * c_in * c_out..][..c_in * c_out];
                    for (ci, &v) in src.iter().enumerate() {
                        let v = v as f64;
                        for (a, &k) in acc.iter_mut().zip(&tap[ci * c_out..(ci + 1) * c_out]) {
                            *a += v * k as f64;
                        }
                    }
                }
            }
            for (o, &a) in out[(i * w + j) * c_out..][..c_out].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    Tensor::from_parts(vec![h * w, c_out], out)
}

/// Input-gradient of [`conv3x3`].
pub(crate) fn conv3x3_backward(dy: &Tensor, h: usize, w: usize, weight: &Tensor) -> Tensor {
    let c_out = dy.shape()[1];
    let c_in = weight.shape()[2];
    let wd = weight.data();
    let gd = dy.data();
    let mut acc = vec![0f64; h * w * c_in];
    for i in 0..h {
        for j in 0..w {
            let g = &gd[(i * w + j) * c_out..][..c_out];
            for ky in 0..3 {
                let y = i as isize + ky as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = j as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let dst = &mut acc[(y as usize * w + xx as usize) * c_in..][..c_in];
                    let tap = &wd[(ky * 3 + kx) * c_in * c_out..][..c_in * c_out];
                    for (ci, d) in dst.iter_mut().enumerate() {
                        let s: f64 = tap[ci * c_out..(ci + 1) * c_out]
                            .iter()
                            .zip(g)
                            .map(|(&k, &gv)| k as f64 * gv as f64)
                            .sum();
                        *d += s;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![h * w, c_in], acc.into_iter().map(|v| v as f32).collect())
}

/// `[H, W, C]` → `[(H/2)(W/2), 4C]`, features ordered `(dy, dx, c)`.
pub(crate) fn patchify(z: &Tensor) -> Result<Tensor> {
    let (hh, ww, c) = z.dims3()?;
    if hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: z.shape().to_vec(),
            reason: "latent extents must be even".into(),
        });
    }
    let (h, w) = (hh / 2, ww / 2);
    let mut out = Vec::with_capacity(hh * ww * c);
    for i in 0..h {
        for j in 0..w {
            for dy in 0..2 {
                for dx in 0..2 {
                    let base = ((2 * i + dy) * ww + 2 * j + dx) * c;
                    out.extend_from_slice(&z.data()[base..base + c]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h * w, 4 * c], out))
}

/// Inverse of [`patchify`].
pub(crate) fn unpatchify(p: &Tensor, hh: usize, ww: usize, c: usize) -> Tensor {
    let (h, w) = (hh / 2, ww / 2);
    let mut out = vec![0f32; hh * ww * c];
    for i in 0..h {
        for j in 0..w {
            let src = p.row(i * w + j);
            for dy in 0..2 {
                for dx in 0..2 {
                    let base = ((2 * i + dy) * ww + 2 * j + dx) * c;
                    let off = (dy * 2 + dx) * c;
                    out[base..base + c].copy_from_slice(&src[off..off + c]);
                }
            }
        }
    }
    Tensor::from_parts(vec![hh, ww, c], out)
}

/// 2×2 average pooling on an `h×w` grid.
pub(crate) fn avg_pool2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.shape()[1];
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let dst = &mut out[(i * ow + j) * c..][..c];
            for ch in 0..c {
                let mut s = 0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x.data()[((2 * i + dy) * w + 2 * j + dx) * c + ch] as f64;
                    }
                }
                dst[ch] = (s * 0.25) as f32;
            }
        }
    }
    Tensor::from_parts(vec![oh * ow, c], out)
}

pub(crate) fn avg_pool2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let c = dy.shape()[1];
    let ow = w / 2;
    let mut out = vec![0f32; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let src = dy.row((i / 2) * ow + j / 2);
            for (o, &g) in out[(i * w + j) * c..][..c].iter_mut().zip(src) {
                *o = g * 0.25;
            }
        }
    }
    Tensor::from_parts(vec![h * w, c], out)
}

/// Nearest-neighbour 2× upsampling from an `h×w` grid.
pub(crate) fn upsample2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            out[(i * ow + j) * c..][..c].copy_from_slice(x.row((i / 2) * w + j / 2));
        }
    }
    Tensor::from_parts(vec![oh * ow, c], out)
}

pub(crate) fn upsample2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let c = dy.shape()[1];
    let ow = 2 * w;
    let mut acc = vec![0f64; h * w * c];
    for i in 0..2 * h {
        for j in 0..ow {
            let dst = &mut acc[((i / 2) * w + j / 2) * c..][..c];
            for (d, &g) in dst.iter_mut().zip(dy.row(i * ow + j)) {
                *d += g as f64;
            }
        }
    }
    Tensor::from_parts(vec![h * w, c], acc.into_iter().map(|v| v as f32).collect())
}

/// Row-wise softmax VJP: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let cols = y.shape()[1];
    let mut out = vec![0f32; y.len()];
    for ((o, yr), gr) in out
        .chunks_exact_mut(cols)
        .zip(y.data().chunks_exact(cols))
        .zip(dy.data().chunks_exact(cols))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for ((o, &a), &b) in o.iter_mut().zip(yr).zip(gr) {
            *o = (a as f64 * (b as f64 - dot)) as f32;
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Sinusoidal embedding of the step index: `[sin(t·f_i)…, cos(t·f_i)…]`.
pub(crate) fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}
