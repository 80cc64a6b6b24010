use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Border handling for [`conv2d`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-range reads take the nearest edge value.
    #[default]
    Replicate,
    Zero,
}

/// Row-wise softmax of a rank-2 tensor, max-subtracted and summed in `f64`.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut out = vec![0f32; rows * cols];
    let mut buf = vec![0f64; cols];
    for r in 0..rows {
        let row = x.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut sum = 0.0;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = (v as f64 - max).exp();
            sum += *b;
        }
        for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(&buf) {
            *o = (b / sum) as f32;
        }
    }
    let out = Tensor::from_parts(vec![rows, cols], out);
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

/// Correlates an `H×W` field with an odd-extent kernel centred on each pixel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let (h, w) = x.dims2()?;
    let (kh, kw) = kernel.dims2()?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: kernel.shape().to_vec(),
            reason: "kernel extents must be odd".into(),
        });
    }
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let src = x.data();
    let k = kernel.data();
    let mut out = vec![0f32; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0f64;
            for a in 0..kh as isize {
                for b in 0..kw as isize {
                    let (y, xx) = (i + a - ry, j + b - rx);
                    let v = match padding {
                        Padding::Replicate => {
                            let y = y.clamp(0, h as isize - 1) as usize;
                            let xx = xx.clamp(0, w as isize - 1) as usize;
                            src[y * w + xx]
                        }
                        Padding::Zero => {
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            src[y as usize * w + xx as usize]
                        }
                    };
                    acc += k[(a as usize) * kw + b as usize] as f64 * v as f64;
                }
            }
            out[i as usize * w + j as usize] = acc as f32;
        }
    }
    let out = Tensor::from_parts(vec![h, w], out);
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Normalised `(2r+1)×(2r+1)` Gaussian kernel.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let n = 2 * radius + 1;
    let r = radius as f64;
    let mut vals = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let (dy, dx) = (a as f64 - r, b as f64 - r);
            vals.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = vals.iter().sum();
    Tensor::new(vec![n, n], vals.into_iter().map(|v| (v / total) as f32).collect())
}

/// Per-axis sampling taps for corner-aligned bilinear interpolation.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for i in 0..output {
            let src = if output == 1 {
                (input as f64 - 1.0) / 2.0
            } else {
                i as f64 * (input as f64 - 1.0) / (output as f64 - 1.0)
            };
            let l = (src.floor() as usize).min(input - 1);
            lo.push(l);
            hi.push((l + 1).min(input - 1));
            frac.push(src - l as f64);
        }
        Self { lo, hi, frac }
    }
}

fn check_extents(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

/// Corner-aligned bilinear resize of an `H×W` field. Same-size resize
/// returns an exact copy.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = x.dims2()?;
    check_extents(out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (ty, tx) = (Taps::new(h, out_h), Taps::new(w, out_w));
    let src = x.data();
    let mut out = vec![0f32; out_h * out_w];
    for i in 0..out_h {
        let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
        for j in 0..out_w {
            let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
            let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
            let bot = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
            out[i * out_w + j] = (top * (1.0 - fy) + bot * fy) as f32;
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// Adjoint of [`resize_bilinear`]: scatters an `out_h×out_w` cotangent back
/// onto the `in_h×in_w` grid.
pub fn resize_bilinear_adjoint(dy: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (out_h, out_w) = dy.dims2()?;
    check_extents(in_h, in_w)?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(dy.clone());
    }
    let (ty, tx) = (Taps::new(in_h, out_h), Taps::new(in_w, out_w));
    let mut acc = vec![0f64; in_h * in_w];
    for i in 0..out_h {
        let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
        for j in 0..out_w {
            let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
            let g = dy.data()[i * out_w + j] as f64;
            acc[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
            acc[y0 * in_w + x1] += g * (1.0 - fy) * fx;
            acc[y1 * in_w + x0] += g * fy * (1.0 - fx);
            acc[y1 * in_w + x1] += g * fy * fx;
        }
    }
    Ok(Tensor::from_parts(
        vec![in_h, in_w],
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn softmax_symmetric_and_stable() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.row(1)[0], 1.0);
        assert!(y.row(1)[1] < 1e-30);
    }

    #[test]
    fn softmax_rejects_rank_one() {
        assert!(softmax_rows(&Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_against_f64_sum() {
        let mut rng = SeededRng::new(11);
        let x = rng.normal_tensor(vec![4, 4], 3.0);
        let y = softmax_rows(&x).unwrap();
        for r in 0..4 {
            // independent evaluation: exp without max-subtraction, f64 throughout
            let row = x.row(r);
            let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            for (c, &v) in row.iter().enumerate() {
                let expect = (v as f64).exp() / z;
                assert!((y.row(r)[c] as f64 - expect).abs() <= 1e-6);
            }
            let s: f64 = y.row(r).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv_identity_and_constant() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_tensor(vec![6, 7], 1.0);
        let mut k = Tensor::zeros(vec![3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, Padding::Zero).unwrap(), x);
        assert_eq!(conv2d(&x, &k, Padding::Replicate).unwrap(), x);

        let c = Tensor::full(vec![5, 5], 0.25);
        let g = gaussian_kernel(1.3, 2).unwrap();
        let y = conv2d(&c, &g, Padding::Replicate).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::zeros(vec![4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(vec![2, 3]), Padding::Zero).is_err());
    }

    #[test]
    fn conv_matches_nested_loop() {
        let mut rng = SeededRng::new(5);
        let x = rng.normal_tensor(vec![5, 5], 1.0);
        let k = rng.normal_tensor(vec![3, 3], 1.0);
        let y = conv2d(&x, &k, Padding::Zero).unwrap();
        for i in 0..5i32 {
            for j in 0..5i32 {
                let mut s = 0f64;
                for a in -1..=1i32 {
                    for b in -1..=1i32 {
                        let (p, q) = (i + a, j + b);
                        if (0..5).contains(&p) && (0..5).contains(&q) {
                            s += k.get2((a + 1) as usize, (b + 1) as usize) as f64
                                * x.get2(p as usize, q as usize) as f64;
                        }
                    }
                }
                assert_eq!(y.get2(i as usize, j as usize), s as f32);
            }
        }
    }

    #[test]
    fn gaussian_kernel_properties() {
        assert_eq!(gaussian_kernel(0.7, 0).unwrap().data(), &[1.0]);
        assert!(gaussian_kernel(0.0, 1).is_err());
        assert!(gaussian_kernel(-1.0, 1).is_err());
        let k = gaussian_kernel(1.7, 3).unwrap();
        let n = 7;
        let s: f64 = k.sum();
        assert!((s - 1.0).abs() <= 1e-7);
        for a in 0..n {
            for b in 0..n {
                assert_eq!(k.get2(a, b), k.get2(b, a));
                assert_eq!(k.get2(a, b), k.get2(n - 1 - a, n - 1 - b));
            }
        }
    }

    #[test]
    fn gaussian_sigma_one_radius_one_formula() {
        let k = gaussian_kernel(1.0, 1).unwrap();
        let e = |d2: f64| (-d2 / 2.0).exp();
        let z = e(0.0) + 4.0 * e(1.0) + 4.0 * e(2.0);
        let expect = [e(2.0), e(1.0), e(2.0), e(1.0), e(0.0), e(1.0), e(2.0), e(1.0), e(2.0)];
        for (v, x) in k.data().iter().zip(expect) {
            assert!((*v as f64 - x / z).abs() <= 1e-7);
        }
    }

    #[test]
    fn resize_identity_constant_and_error() {
        let mut rng = SeededRng::new(9);
        let x = rng.normal_tensor(vec![5, 3], 1.0);
        assert_eq!(resize_bilinear(&x, 5, 3).unwrap(), x);
        let c = Tensor::full(vec![4, 6], -0.3);
        let y = resize_bilinear(&c, 9, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v + 0.3).abs() < 1e-7));
        assert!(resize_bilinear(&c, 0, 2).is_err());
    }

    #[test]
    fn resize_ramp_down_matches_closed_form() {
        // x[i,j] = i*4 + j; corner-aligned 4->2 samples source coordinates {0, 3}
        let x = Tensor::from_fn(vec![4, 4], |k| k as f32).unwrap();
        let y = resize_bilinear(&x, 2, 2).unwrap();
        let oracle = |i: usize, j: usize| {
            let (sy, sx) = (i as f64 * 3.0, j as f64 * 3.0);
            sy * 4.0 + sx
        };
        for i in 0..2 {
            for j in 0..2 {
                assert!((y.get2(i, j) as f64 - oracle(i, j)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn resize_adjoint_is_transpose() {
        let mut rng = SeededRng::new(21);
        let x = rng.normal_tensor(vec![5, 7], 1.0);
        let dy = rng.normal_tensor(vec![9, 4], 1.0);
        let lhs = resize_bilinear(&x, 9, 4).unwrap().dot(&dy).unwrap();
        let rhs = x.dot(&resize_bilinear_adjoint(&dy, 5, 7).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-5 * lhs.abs().max(1.0));
    }
}
