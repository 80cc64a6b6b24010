use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Lower bound applied to masked standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

/// Per-channel weighted moments over the spatial axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
    /// Whether each channel hit the floor.
    pub floored: Vec<bool>,
}

/// Splits a tensor into (positions, channels) with channels on the last axis.
fn layout(v: &Tensor) -> Result<(usize, usize)> {
    let c = *v
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("masked statistics need a channel axis"))?;
    let n = if c == 0 { 0 } else { v.len() / c };
    if v.rank() < 2 || n == 0 {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: "expected a spatial axis and a channel axis".into(),
        });
    }
    Ok((n, c))
}

fn check_weights(n: usize, weights: &[f32]) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::ShapeMismatch {
            context: "mask weights",
            expected: vec![n],
            got: vec![weights.len()],
        });
    }
    let mass: f64 = weights.iter().map(|&w| w as f64).sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroMassMask);
    }
    Ok(mass)
}

/// Weighted mean and standard deviation per channel, with mask values as
/// weights on each spatial position.
pub fn masked_stats(v: &Tensor, weights: &[f32]) -> Result<ChannelStats> {
    let (n, c) = layout(v)?;
    let mass = check_weights(n, weights)?;
    let d = v.data();
    let mut mean = vec![0f64; c];
    for (row, &w) in d.chunks_exact(c).zip(weights) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += w as f64 * x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let mut var = vec![0f64; c];
    for (row, &w) in d.chunks_exact(c).zip(weights) {
        for ((s, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            let dx = x as f64 - m;
            *s += w as f64 * dx * dx;
        }
    }
    let raw: Vec<f64> = var.iter().map(|s| (s / mass).sqrt()).collect();
    Ok(ChannelStats {
        floored: raw.iter().map(|&s| s < STD_FLOOR).collect(),
        std: raw.into_iter().map(|s| s.max(STD_FLOOR)).collect(),
        mean,
    })
}

/// Renormalises `concept` so its masked moments match those of `source`,
/// at every position. Foreground selection happens in the blend.
pub fn masked_adain(source: &Tensor, concept: &Tensor, weights: &[f32]) -> Result<Tensor> {
    concept.ensure_shape("masked_adain", source.shape())?;
    let (_, c) = layout(source)?;
    let s = masked_stats(source, weights)?;
    let k = masked_stats(concept, weights)?;
    let gain: Vec<f64> = s.std.iter().zip(&k.std).map(|(a, b)| a / b).collect();
    let data = concept
        .data()
        .chunks_exact(c)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(ch, &x)| ((x as f64 - k.mean[ch]) * gain[ch] + s.mean[ch]) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    let out = Tensor::from_parts(source.shape().to_vec(), data);
    out.ensure_finite("masked_adain")?;
    Ok(out)
}

/// Vector–Jacobian product of [`masked_adain`] with respect to `concept`.
pub fn masked_adain_vjp(
    source: &Tensor,
    concept: &Tensor,
    weights: &[f32],
    d_out: &Tensor,
) -> Result<Tensor> {
    concept.ensure_shape("masked_adain_vjp", source.shape())?;
    d_out.ensure_shape("masked_adain_vjp", source.shape())?;
    let (n, c) = layout(source)?;
    let mass = check_weights(n, weights)?;
    let s = masked_stats(source, weights)?;
    let k = masked_stats(concept, weights)?;
    let x = concept.data();
    let g = d_out.data();
    let mut sum_g = vec![0f64; c];
    let mut sum_gx = vec![0f64; c];
    for p in 0..n {
        for ch in 0..c {
            let gv = g[p * c + ch] as f64;
            let xh = (x[p * c + ch] as f64 - k.mean[ch]) / k.std[ch];
            sum_g[ch] += gv;
            sum_gx[ch] += gv * xh;
        }
    }
    let mut out = vec![0f32; n * c];
    for p in 0..n {
        let wp = weights[p] as f64 / mass;
        for ch in 0..c {
            let a = s.std[ch] / k.std[ch];
            let xh = (x[p * c + ch] as f64 - k.mean[ch]) / k.std[ch];
            let mut v = g[p * c + ch] as f64 - wp * sum_g[ch];
            if !k.floored[ch] {
                v -= wp * xh * sum_gx[ch];
            }
            out[p * c + ch] = (a * v) as f32;
        }
    }
    Ok(Tensor::from_parts(source.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn ones(n: usize) -> Vec<f32> {
        vec![1.0; n]
    }

    #[test]
    fn constant_input_hits_floor() {
        let v = Tensor::full(vec![6, 2], 3.5);
        let s = masked_stats(&v, &ones(6)).unwrap();
        assert_eq!(s.mean, vec![3.5, 3.5]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let v = Tensor::zeros(vec![3, 1]);
        assert!(matches!(masked_stats(&v, &[0.0; 3]), Err(Error::ZeroMassMask)));
        assert!(masked_adain(&v, &v, &[0.0; 3]).is_err());
    }

    #[test]
    fn all_ones_mask_is_plain_moments() {
        let mut rng = SeededRng::new(4);
        let v = rng.normal_tensor(vec![10, 3], 2.0);
        let s = masked_stats(&v, &ones(10)).unwrap();
        for ch in 0..3 {
            let xs: Vec<f64> = (0..10).map(|p| v.data()[p * 3 + ch] as f64).collect();
            let m = xs.iter().sum::<f64>() / 10.0;
            let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 10.0).sqrt();
            assert!((s.mean[ch] - m).abs() <= 1e-6);
            assert!((s.std[ch] - sd).abs() <= 1e-6);
        }
    }

    #[test]
    fn toy_channel_matches_hand_values() {
        // masked src {0,2}, masked concept {10,12}; the unmasked entries are noise
        let src = Tensor::new(vec![3, 1], vec![0.0, 2.0, 40.0]).unwrap();
        let con = Tensor::new(vec![3, 1], vec![10.0, 12.0, -7.0]).unwrap();
        let w = [1.0, 1.0, 0.0];
        let out = masked_adain(&src, &con, &w).unwrap();
        assert!((out.data()[0] - 0.0).abs() < 1e-6);
        assert!((out.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_is_exact() {
        let mut rng = SeededRng::new(8);
        let v = rng.normal_tensor(vec![12, 4], 1.5);
        let w: Vec<f32> = (0..12).map(|i| (i % 3) as f32 / 2.0).collect();
        assert_eq!(masked_adain(&v, &v, &w).unwrap(), v);
    }

    #[test]
    fn constant_concept_maps_to_source_mean() {
        let mut rng = SeededRng::new(2);
        let src = rng.normal_tensor(vec![8, 2], 1.0);
        let con = Tensor::full(vec![8, 2], 4.0);
        let w = ones(8);
        let out = masked_adain(&src, &con, &w).unwrap();
        let s = masked_stats(&src, &w).unwrap();
        for p in 0..8 {
            for ch in 0..2 {
                assert!((out.data()[p * 2 + ch] as f64 - s.mean[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn vjp_matches_central_difference() {
        let mut rng = SeededRng::new(13);
        let src = rng.normal_tensor(vec![7, 2], 1.0);
        let con = rng.normal_tensor(vec![7, 2], 2.0);
        let w: Vec<f32> = (0..7).map(|_| rng.uniform() as f32).collect();
        let dy = rng.normal_tensor(vec![7, 2], 1.0);
        let g = masked_adain_vjp(&src, &con, &w, &dy).unwrap();
        let f = |c: &Tensor| masked_adain(&src, c, &w).unwrap().dot(&dy).unwrap();
        for i in 0..14 {
            let h = 1e-2f32;
            let mut p = con.clone();
            p.data_mut()[i] += h;
            let mut m = con.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h as f64);
            assert!((fd - g.data()[i] as f64).abs() < 2e-3, "{i}: {fd} vs {}", g.data()[i]);
        }
    }
}
