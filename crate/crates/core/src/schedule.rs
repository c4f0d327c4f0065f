//! Discrete forward-diffusion schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub max_timestep: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            max_timestep: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-beta schedule with `alpha_bar[0] = 1` (clean data) and
/// `alpha_bar[t] = prod_{s=1..t} (1 - beta_s)` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(config: ScheduleConfig) -> Result<Self> {
        let t_max = config.max_timestep;
        if t_max < 1 || !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(Error::validation(alloc::format!("invalid schedule {:?}", config)));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=t_max {
            let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
            let beta = config.beta_start + frac * (config.beta_end - config.beta_start);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn max_timestep(&self) -> usize {
        self.config.max_timestep
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.config.max_timestep {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                min: 0,
                max: self.config.max_timestep as i64,
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// One ancestral step from `t` to `s < t` given the predicted noise.
    /// Returns the posterior mean and standard deviation of `z_s`.
    pub fn ancestral_step(&self, z_t: &Tensor, eps_pred: &Tensor, t: usize, s: usize) -> Result<(Tensor, f64)> {
        if s >= t {
            return Err(Error::validation("ancestral_step needs s < t"));
        }
        let ab_t = self.alpha_bar(t)?;
        let ab_s = self.alpha_bar(s)?;
        let alpha = ab_t / ab_s;
        let beta = 1.0 - alpha;
        let (sa, sb) = (libm::sqrt(ab_t), libm::sqrt(1.0 - ab_t));
        let c0 = libm::sqrt(ab_s) * beta / (1.0 - ab_t);
        let ct = libm::sqrt(alpha) * (1.0 - ab_s) / (1.0 - ab_t);
        let mean = z_t.zip_map(eps_pred, |z, e| {
            let x0 = ((z - sb * e) / sa).clamp(-X0_CLIP, X0_CLIP);
            c0 * x0 + ct * z
        })?;
        let var = (1.0 - ab_s) / (1.0 - ab_t) * beta;
        Ok((mean, libm::sqrt(var.max(0.0))))
    }
}

/// Clean-latent prediction clip used by the sampler; toy latents live in [-1, 1]
/// except the detail channel.
const X0_CLIP: f64 = 4.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn t_zero_is_identity() {
        let s = sched();
        let mut r = rng::seeded(0);
        let z0 = rng::normal_tensor(&mut r, &[4, 3, 3]);
        let eps = rng::normal_tensor(&mut r, &[4, 3, 3]);
        assert_eq!(s.add_noise(&z0, 0, &eps).unwrap(), z0);
    }

    #[test]
    fn terminal_signal_is_negligible() {
        // alpha_bar_T = prod (1 - beta_t) recomputed in closed loop
        let mut ab = 1.0f64;
        for t in 1..=1000 {
            ab *= 1.0 - (1e-4 + (t - 1) as f64 / 999.0 * (2e-2 - 1e-4));
        }
        let s = sched();
        assert!((s.alpha_bar(1000).unwrap() - ab).abs() < 1e-15);
        assert!(ab.sqrt() < 1e-2);
    }

    #[test]
    fn strictly_decreasing() {
        let s = sched();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn out_of_range() {
        let s = sched();
        let z = Tensor::zeros(&[2]);
        assert!(matches!(s.add_noise(&z, 1001, &z), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn conditional_variance_matches_schedule() {
        let s = sched();
        let t = 300;
        let z0 = Tensor::full(&[1], 0.7);
        let mut r = rng::seeded(11);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = rng::normal_tensor(&mut r, &[1]);
                s.add_noise(&z0, t, &eps).unwrap().data()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 - s.alpha_bar(t).unwrap();
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn terminal_draws_decorrelate_from_data() {
        let s = sched();
        let mut r = rng::seeded(12);
        let z0 = rng::normal_tensor(&mut r, &[4096]);
        let eps = rng::normal_tensor(&mut r, &[4096]);
        let zt = s.add_noise(&z0, 1000, &eps).unwrap();
        let corr = z0.data().iter().zip(zt.data()).map(|(a, b)| a * b).sum::<f64>()
            / (z0.sum_sq().sqrt() * zt.sum_sq().sqrt());
        assert!(corr.abs() < 0.05, "corr {corr}");
    }
}
