use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Self::from_alpha_bars(alpha_bars[1..].to_vec())
    }

    /// Schedule from `ᾱ_1..ᾱ_T`; an empty list gives the degenerate `T = 0`
    /// schedule.
    pub fn from_alpha_bars(values: Vec<f64>) -> Result<Self> {
        let mut alpha_bars = Vec::with_capacity(values.len() + 1);
        alpha_bars.push(1.0);
        for v in values {
            let prev = *alpha_bars.last().expect("non-empty");
            if !(v > 0.0 && v < prev) || (alpha_bars.len() == 1 && v > 1.0) {
                return Err(Error::invalid(format!(
                    "alpha bars must decrease strictly within (0, 1], got {v} after {prev}"
                )));
            }
            alpha_bars.push(v);
        }
        Ok(Self { alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// Noise scale `√(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                index: t,
                len: self.steps() + 1,
            });
        }
        Ok(())
    }

    /// Weight of `z_t` in the deterministic update to `z_{t−1}`.
    pub fn latent_coefficient(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok((self.alpha_bars[t - 1] / self.alpha_bars[t]).sqrt())
    }

    /// Weight of the predicted noise in the update to `z_{t−1}`; negative
    /// because `ᾱ_{t−1} > ᾱ_t`.
    pub fn eps_coefficient(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let (a, ap) = (self.alpha_bars[t], self.alpha_bars[t - 1]);
        Ok((1.0 - ap).sqrt() - (ap * (1.0 - a) / a).sqrt())
    }

    /// Deterministic DDIM update `z_t → z_{t−1}`.
    pub fn ddim_step(&self, z: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let (a, ap) = (self.alpha_bars[t], self.alpha_bars[t - 1]);
        let (sa, sn, sap, snp) = (a.sqrt(), (1.0 - a).sqrt(), ap.sqrt(), (1.0 - ap).sqrt());
        let out = z.zip_map(eps, |zv, ev| {
            let x0 = (zv as f64 - sn * ev as f64) / sa;
            (sap * x0 + snp * ev as f64) as f32
        })?;
        out.ensure_finite("ddim step")?;
        Ok(out)
    }

    /// Reverse update `z_{t−1} → z_t` with a given noise estimate.
    pub fn ddim_inverse_step(&self, z_prev: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let (a, ap) = (self.alpha_bars[t], self.alpha_bars[t - 1]);
        let (sa, sn, sap, snp) = (a.sqrt(), (1.0 - a).sqrt(), ap.sqrt(), (1.0 - ap).sqrt());
        let out = z_prev.zip_map(eps, |zv, ev| {
            let x0 = (zv as f64 - snp * ev as f64) / sap;
            (sa * x0 + sn * ev as f64) as f32
        })?;
        out.ensure_finite("ddim inversion step")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
    }

    #[test]
    fn default_matches_cumulative_product() {
        let s = NoiseSchedule::default();
        let mut p = 1.0f64;
        for t in 1..=50 {
            p *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 49.0);
            assert!((s.alpha_bar(t) - p).abs() <= 1e-9);
        }
        assert!((s.sigma(50) - (1.0 - p).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_bars(vec![0.9, 0.95]).is_err());
        assert_eq!(NoiseSchedule::from_alpha_bars(vec![]).unwrap().steps(), 0);
    }

    #[test]
    fn step_range_checked() {
        let s = make_schedule(5, 1e-3, 0.02).unwrap();
        let z = Tensor::zeros(vec![2, 2, 1]);
        assert!(s.ddim_step(&z, &z, 0).is_err());
        assert!(s.ddim_step(&z, &z, 6).is_err());
        assert!(s.ddim_step(&z, &z, 5).is_ok());
    }

    #[test]
    fn zero_noise_scales_latent() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(1);
        let z = rng.normal_tensor(vec![4, 4, 3], 1.0);
        let zero = Tensor::zeros(vec![4, 4, 3]);
        for t in [1, 25, 50] {
            let out = s.ddim_step(&z, &zero, t).unwrap();
            let k = (s.alpha_bar(t - 1) / s.alpha_bar(t)).sqrt();
            for (o, &v) in out.data().iter().zip(z.data()) {
                assert!((*o as f64 - k * v as f64).abs() < 1e-6);
            }
            assert!(s.ddim_step(&zero, &zero, t).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn step_matches_scalar_formula() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(9);
        let z = rng.normal_tensor(vec![3, 5, 3], 1.0);
        let e = rng.normal_tensor(vec![3, 5, 3], 1.0);
        for t in [1, 2, 17, 50] {
            let out = s.ddim_step(&z, &e, t).unwrap();
            let (a, ap) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            let lin = s.latent_coefficient(t).unwrap();
            let ec = s.eps_coefficient(t).unwrap();
            assert!(ec < 0.0);
            for i in 0..z.len() {
                let (zv, ev) = (z.data()[i] as f64, e.data()[i] as f64);
                let x0 = (zv - (1.0 - a).sqrt() * ev) / a.sqrt();
                let expect = ap.sqrt() * x0 + (1.0 - ap).sqrt() * ev;
                assert!((out.data()[i] as f64 - expect).abs() <= 1e-6);
                assert!((lin * zv + ec * ev - expect).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn inverse_undoes_step_for_fixed_noise() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(4);
        let z = rng.normal_tensor(vec![4, 4, 3], 1.0);
        let e = rng.normal_tensor(vec![4, 4, 3], 1.0);
        for t in [1, 30, 50] {
            let back = s.ddim_inverse_step(&s.ddim_step(&z, &e, t).unwrap(), &e, t).unwrap();
            assert!(back.max_abs_diff(&z).unwrap() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn linear_schedule_decreases(steps in 1usize..200, a in 1e-5f64..0.05, extra in 0.0f64..0.3) {
            let s = make_schedule(steps, a, a + extra).unwrap();
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.alpha_bar(t) > 0.0);
            }
        }
    }
}
