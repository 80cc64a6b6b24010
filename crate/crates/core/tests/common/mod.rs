//! Straight-line `f64` re-implementation of the denoiser and the shape
//! energy, written independently of the library's layer code. Used as the
//! oracle for forward values, overrides, and finite-difference gradients.

#![allow(dead_code)]

use latentswap::denoiser::{Denoiser, DenoiserConfig};
use latentswap::numerics::Tensor;

pub struct RefNet<'a> {
    den: &'a Denoiser,
}

/// Hooks applied to the attention variables of each layer, in order.
#[derive(Default)]
pub struct RefHooks<'a> {
    pub self_map: Option<&'a dyn Fn(usize, &mut Vec<f64>)>,
    pub self_out: Option<&'a dyn Fn(usize, &mut Vec<f64>)>,
    pub cross_map: Option<&'a dyn Fn(usize, &mut Vec<f64>)>,
}

pub struct RefLayer {
    pub h: usize,
    pub w: usize,
    pub self_map: Vec<f64>,
    pub cross_map: Vec<f64>,
    pub self_out: Vec<f64>,
}

pub struct RefPass {
    pub eps: Vec<f64>,
    pub layers: Vec<RefLayer>,
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

fn linear(x: &[f64], n: usize, cin: usize, w: &Tensor) -> Vec<f64> {
    let cout = w.shape()[1];
    assert_eq!(w.shape()[0], cin);
    let wd = w.data();
    let mut out = vec![0.0; n * cout];
    for r in 0..n {
        for o in 0..cout {
            let mut s = 0.0;
            for i in 0..cin {
                s += x[r * cin + i] * wd[i * cout + o] as f64;
            }
            out[r * cout + o] = s;
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f32]) {
    let c = b.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % c] as f64;
    }
}

fn conv3x3(x: &[f64], h: usize, w: usize, c: usize, wt: &Tensor, b: &Tensor) -> Vec<f64> {
    let cout = wt.shape()[3];
    let wd = wt.data();
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for o in 0..cout {
                let mut s = b.data()[o] as f64;
                for a in 0..3isize {
                    for bb in 0..3isize {
                        let (y, xx) = (i + a - 1, j + bb - 1);
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let widx = ((a as usize * 3 + bb as usize) * c + ci) * cout + o;
                            s += x[(y as usize * w + xx as usize) * c + ci] * wd[widx] as f64;
                        }
                    }
                }
                out[(i as usize * w + j as usize) * cout + o] = s;
            }
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

fn attention_scores(q: &[f64], k: &[f64], nq: usize, nk: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * nk];
    for i in 0..nq {
        for j in 0..nk {
            let mut s = 0.0;
            for c in 0..d {
                s += q[i * d + c] * k[j * d + c];
            }
            out[i * nk + j] = s * scale;
        }
    }
    softmax_rows(&mut out, nk);
    out
}

fn mix(a: &[f64], v: &[f64], nq: usize, nk: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; nq * c];
    for i in 0..nq {
        for j in 0..nk {
            let p = a[i * nk + j];
            for o in 0..c {
                out[i * c + o] += p * v[j * c + o];
            }
        }
    }
    out
}

impl<'a> RefNet<'a> {
    pub fn new(den: &'a Denoiser) -> Self {
        Self { den }
    }

    fn w(&self, name: &str) -> &Tensor {
        self.den.weights().get(name).unwrap()
    }

    fn cfg(&self) -> &DenoiserConfig {
        self.den.config()
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        p: &str,
        idx: usize,
        x: Vec<f64>,
        h: usize,
        w: usize,
        c: usize,
        temb: &[f64],
        ctx: &[f64],
        ntok: usize,
        hooks: &RefHooks<'_>,
        layers: &mut Vec<RefLayer>,
    ) -> Vec<f64> {
        let n = h * w;
        let d = self.cfg().head_dim;
        let dt = self.cfg().text_dim;
        let td = self.cfg().time_dim;
        let name = |s: &str| format!("{p}.{s}");
        let mut pre = conv3x3(&x, h, w, c, self.w(&name("res.conv1.w")), self.w(&name("res.conv1.b")));
        let tb = linear(temb, 1, td, self.w(&name("res.time.w")));
        for (i, v) in pre.iter_mut().enumerate() {
            *v += tb[i % c];
        }
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let r = conv3x3(&act, h, w, c, self.w(&name("res.conv2.w")), self.w(&name("res.conv2.b")));
        let mut hs: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + b).collect();

        let q = linear(&hs, n, c, self.w(&name("self.q")));
        let k = linear(&hs, n, c, self.w(&name("self.k")));
        let v = linear(&hs, n, c, self.w(&name("self.v")));
        let mut m = attention_scores(&q, &k, n, n, d);
        if let Some(f) = hooks.self_map {
            f(idx, &mut m);
        }
        let mut phi = mix(&m, &v, n, n, c);
        if let Some(f) = hooks.self_out {
            f(idx, &mut phi);
        }
        let o = linear(&phi, n, c, self.w(&name("self.o")));
        for (a, b) in hs.iter_mut().zip(&o) {
            *a += b;
        }

        let qc = linear(&hs, n, c, self.w(&name("cross.q")));
        let kc = linear(ctx, ntok, dt, self.w(&name("cross.k")));
        let vc = linear(ctx, ntok, dt, self.w(&name("cross.v")));
        let mut a = attention_scores(&qc, &kc, n, ntok, d);
        if let Some(f) = hooks.cross_map {
            f(idx, &mut a);
        }
        let oc = mix(&a, &vc, n, ntok, c);
        let o = linear(&oc, n, c, self.w(&name("cross.o")));
        for (x, y) in hs.iter_mut().zip(&o) {
            *x += y;
        }
        layers.push(RefLayer {
            h,
            w,
            self_map: m,
            cross_map: a,
            self_out: phi,
        });
        hs
    }

    /// Noise prediction for an `H×W×C` latent and `ntok×d_text` context.
    pub fn forward(&self, z: &[f64], hh: usize, ww: usize, t: usize, ctx: &[f64], hooks: &RefHooks<'_>) -> RefPass {
        let cfg = self.cfg().clone();
        let ci = cfg.image_channels;
        let dt = cfg.text_dim;
        let ntok = ctx.len() / dt;
        let td = cfg.time_dim;
        let half = td / 2;
        let mut e = vec![0.0; td];
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            e[i] = (t as f64 * f).sin();
            e[half + i] = (t as f64 * f).cos();
        }
        let mut temb = linear(&e, 1, td, self.w("time.w"));
        add_bias(&mut temb, self.w("time.b").data());
        let temb: Vec<f64> = temb.iter().map(|&v| silu(v)).collect();

        let (gh, gw) = (hh / 2, ww / 2);
        let mut patches = vec![0.0; gh * gw * 4 * ci];
        for i in 0..gh {
            for j in 0..gw {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..ci {
                            patches[(i * gw + j) * 4 * ci + (dy * 2 + dx) * ci + c] =
                                z[((2 * i + dy) * ww + 2 * j + dx) * ci + c];
                        }
                    }
                }
            }
        }
        let l = cfg.levels;
        let mut layers = Vec::new();
        let mut skips = Vec::new();
        let mut idx = 0;
        let mut h = linear(&patches, gh * gw, 4 * ci, self.w("in.w"));
        add_bias(&mut h, self.w("in.b").data());
        let (mut lh, mut lw) = (gh, gw);
        for lv in 0..l - 1 {
            let c = cfg.channels[lv];
            h = self.block(&format!("enc{lv}"), idx, h, lh, lw, c, &temb, ctx, ntok, hooks, &mut layers);
            idx += 1;
            skips.push(h.clone());
            let (ph, pw) = (lh / 2, lw / 2);
            let mut pooled = vec![0.0; ph * pw * c];
            for i in 0..ph {
                for j in 0..pw {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += h[((2 * i + dy) * lw + 2 * j + dx) * c + ch];
                            }
                        }
                        pooled[(i * pw + j) * c + ch] = s / 4.0;
                    }
                }
            }
            h = linear(&pooled, ph * pw, c, self.w(&format!("down{lv}.w")));
            lh = ph;
            lw = pw;
        }
        h = self.block("mid", idx, h, lh, lw, cfg.channels[l - 1], &temb, ctx, ntok, hooks, &mut layers);
        idx += 1;
        for lv in (0..l - 1).rev() {
            let (cc, c) = (cfg.channels[lv + 1], cfg.channels[lv]);
            let (uh, uw) = (lh * 2, lw * 2);
            let mut up = vec![0.0; uh * uw * cc];
            for i in 0..uh {
                for j in 0..uw {
                    for ch in 0..cc {
                        up[(i * uw + j) * cc + ch] = h[((i / 2) * lw + j / 2) * cc + ch];
                    }
                }
            }
            let mut x = linear(&up, uh * uw, cc, self.w(&format!("up{lv}.w")));
            let skip = skips.pop().unwrap();
            for (a, b) in x.iter_mut().zip(&skip) {
                *a += b;
            }
            lh = uh;
            lw = uw;
            h = self.block(&format!("dec{lv}"), idx, x, lh, lw, c, &temb, ctx, ntok, hooks, &mut layers);
            idx += 1;
        }
        let mut o = linear(&h, gh * gw, cfg.channels[0], self.w("out.w"));
        add_bias(&mut o, self.w("out.b").data());
        let mut eps = vec![0.0; hh * ww * ci];
        for i in 0..gh {
            for j in 0..gw {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..ci {
                            eps[((2 * i + dy) * ww + 2 * j + dx) * ci + c] =
                                o[(i * gw + j) * 4 * ci + (dy * 2 + dx) * ci + c];
                        }
                    }
                }
            }
        }
        RefPass { eps, layers }
    }
}

/// Corner-aligned bilinear resize in `f64`.
pub fn resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        if n_out == 1 {
            (n_in as f64 - 1.0) / 2.0
        } else {
            i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let y = coord(i, h, oh);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..ow {
            let x = coord(j, w, ow);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let g = |a: usize, b: usize| src[a * w + b];
            out[i * ow + j] = (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1))
                + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1));
        }
    }
    out
}

/// Soft shape of token `k` for one layer's cross map.
pub fn soft_shape(a: &[f64], ntok: usize, k: usize, threshold: f64, tau: f64) -> Vec<f64> {
    let col: Vec<f64> = a.chunks(ntok).map(|r| r[k]).collect();
    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; col.len()];
    }
    col.iter()
        .map(|&v| 1.0 / (1.0 + (-(((v - lo) / (hi - lo)) - threshold) / tau).exp()))
        .collect()
}

/// `Σ|mask − mean_l resize(shape_l)|` at the mask's `oh×ow` resolution.
pub fn shape_energy(pass: &RefPass, ntok: usize, k: usize, mask: &[f64], oh: usize, ow: usize) -> f64 {
    let mut agg = vec![0.0; oh * ow];
    for l in &pass.layers {
        let s = soft_shape(&l.cross_map, ntok, k, 0.4, 0.1);
        let r = resize(&s, l.h, l.w, oh, ow);
        for (a, b) in agg.iter_mut().zip(&r) {
            *a += b / pass.layers.len() as f64;
        }
    }
    mask.iter().zip(&agg).map(|(m, a)| (m - a).abs()).sum()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
