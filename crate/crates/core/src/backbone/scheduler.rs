//! Noise schedule and the deterministic sampler / inversion steps.
//!
//! Cosine cumulative-signal schedule over `T` steps. Timestep index `t` runs
//! in `[0, T)`: `t = 0` is the least-noised level, `t = T-1` the most. The
//! sampler is DDIM with eta 0, so sampling and inversion are exact algebraic
//! inverses given the same noise prediction.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone)]
pub struct SchedulerState {
    steps: usize,
    alpha_bar: Vec<f64>,
    pub seed: u64,
}

impl SchedulerState {
    /// Cosine schedule with the usual small offset; `alpha_bar` is clamped
    /// away from 0 and 1 and is strictly decreasing in `t`.
    pub fn cosine(steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("scheduler steps must be >= 1".into()));
        }
        const S: f64 = 0.008;
        let f = |u: f64| ((u + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let alpha_bar: Vec<f64> = (0..steps)
            .map(|t| (f((t + 1) as f64 / steps as f64) / f0).clamp(1e-4, 1.0 - 1e-4))
            .collect();
        for w in alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::InvalidArgument(
                    "schedule not strictly decreasing; increase steps".into(),
                ));
            }
        }
        Ok(SchedulerState {
            steps,
            alpha_bar,
            seed,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, z0: &Array3<f64>, noise: &Array3<f64>, t: usize) -> Array3<f64> {
        let ab = self.alpha_bar(t);
        z0.mapv(|v| v * ab.sqrt()) + noise.mapv(|v| v * (1.0 - ab).sqrt())
    }

    /// Seeded standard-normal draw; same seed and label give bit-identical
    /// noise.
    pub fn noise(&self, shape: (usize, usize, usize), label: &str) -> Array3<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, label));
        Array3::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
    }
}

/// Deterministic DDIM stepping over a schedule.
#[derive(Debug, Clone, Copy)]
pub struct DdimSampler<'a> {
    pub scheduler: &'a SchedulerState,
}

impl<'a> DdimSampler<'a> {
    pub fn new(scheduler: &'a SchedulerState) -> Self {
        DdimSampler { scheduler }
    }

    fn signal(&self, t: Option<usize>) -> f64 {
        match t {
            Some(t) => self.scheduler.alpha_bar(t),
            None => 1.0, // clean image
        }
    }

    /// Predicted clean latent from `z_t` and the noise estimate.
    pub fn predict_clean(&self, z_t: &Array3<f64>, eps: &Array3<f64>, t: usize) -> Array3<f64> {
        let ab = self.scheduler.alpha_bar(t);
        (z_t - &eps.mapv(|v| v * (1.0 - ab).sqrt())).mapv(|v| v / ab.sqrt())
    }

    /// One denoising step from level `t` to `t_prev` (`None` = clean).
    pub fn step(
        &self,
        z_t: &Array3<f64>,
        eps: &Array3<f64>,
        t: usize,
        t_prev: Option<usize>,
    ) -> Array3<f64> {
        let x0 = self.predict_clean(z_t, eps, t);
        let ab_prev = self.signal(t_prev);
        x0.mapv(|v| v * ab_prev.sqrt()) + eps.mapv(|v| v * (1.0 - ab_prev).sqrt())
    }

    /// Algebraic inverse of [`Self::step`]: reconstructs `z_t` from
    /// `z_{t_prev}` given the same noise estimate.
    pub fn inverse_step(
        &self,
        z_prev: &Array3<f64>,
        eps: &Array3<f64>,
        t_prev: Option<usize>,
        t: usize,
    ) -> Array3<f64> {
        let ab_prev = self.signal(t_prev);
        let x0 = (z_prev - &eps.mapv(|v| v * (1.0 - ab_prev).sqrt())).mapv(|v| v / ab_prev.sqrt());
        let ab = self.scheduler.alpha_bar(t);
        x0.mapv(|v| v * ab.sqrt()) + eps.mapv(|v| v * (1.0 - ab).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_strictly_decreasing_with_length_t() {
        let s = SchedulerState::cosine(50, 1).unwrap();
        assert_eq!(s.alphas().len(), 50);
        for w in s.alphas().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bar(0) > 0.99);
        assert!(s.alpha_bar(49) < 1e-3);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = SchedulerState::cosine(50, 9).unwrap();
        let b = SchedulerState::cosine(50, 9).unwrap();
        assert_eq!(a.noise((2, 4, 4), "x"), b.noise((2, 4, 4), "x"));
        assert_ne!(a.noise((2, 4, 4), "x"), a.noise((2, 4, 4), "y"));
    }

    #[test]
    fn inverse_step_inverts_step_given_same_eps() {
        let s = SchedulerState::cosine(50, 2).unwrap();
        let sampler = DdimSampler::new(&s);
        let z = s.noise((3, 4, 4), "z");
        let eps = s.noise((3, 4, 4), "e");
        for (t, t_prev) in [(30, Some(29)), (1, Some(0)), (0, None)] {
            let down = sampler.step(&z, &eps, t, t_prev);
            let back = sampler.inverse_step(&down, &eps, t_prev, t);
            let err = (&back - &z).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(err < 1e-9, "t={t} err={err}");
        }
    }

    #[test]
    fn add_noise_at_low_t_keeps_most_signal() {
        let s = SchedulerState::cosine(50, 3).unwrap();
        let z0 = Array3::from_elem((1, 2, 2), 1.0);
        let eps = Array3::zeros((1, 2, 2));
        let z = s.add_noise(&z0, &eps, 0);
        assert!(z[[0, 0, 0]] > 0.99);
    }

    #[test]
    fn zero_steps_is_rejected() {
        assert!(SchedulerState::cosine(0, 1).is_err());
    }
}
