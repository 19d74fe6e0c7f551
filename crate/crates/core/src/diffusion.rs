//! Noise schedule and the closed-form forward / reverse diffusion updates.
//!
//! Timesteps are 1-based everywhere in the public API: `t` ranges over
//! `1..=steps()`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step variances `beta_t`, `alpha_t = 1 - beta_t` and the running
/// product `gamma_t = alpha_1 * ... * alpha_t`, all in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in (0, 1), got {beta_start}..{beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidArgument(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut gammas = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            gammas.push(acc);
        }
        Ok(Self { betas, alphas, gammas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Coefficients `(sqrt(gamma_t), sqrt(1 - gamma_t))` of the forward marginal.
    pub fn marginal_coefs(&self, t: usize) -> (f64, f64) {
        let g = self.gamma(t);
        (g.sqrt(), (1.0 - g).sqrt())
    }
}

/// `sqrt(gamma_t) * x0 + sqrt(1 - gamma_t) * eps`, elementwise.
pub fn forward_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    x0.ensure_same_shape(eps)?;
    let (a, b) = sched.marginal_coefs(t);
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One ancestral reverse update:
/// `(xt - (1 - alpha_t) / sqrt(1 - gamma_t) * eps_hat) / sqrt(alpha_t) + sqrt(1 - alpha_t) * z`.
pub fn reverse_step<T: Scalar>(
    xt: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    xt.ensure_same_shape(eps_hat)?;
    xt.ensure_same_shape(z)?;
    let c = ReverseCoefs::at(sched, t);
    let (inv, k, s) = (T::from_f64(c.inv_sqrt_alpha), T::from_f64(c.eps_coef), T::from_f64(c.noise_coef));
    let data = xt
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &zz)| inv * (x - k * e) + s * zz)
        .collect();
    Tensor::new(xt.shape(), data)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ReverseCoefs {
    pub inv_sqrt_alpha: f64,
    pub eps_coef: f64,
    pub noise_coef: f64,
}

impl ReverseCoefs {
    pub fn at(sched: &NoiseSchedule, t: usize) -> Self {
        let a = sched.alpha(t);
        Self {
            inv_sqrt_alpha: 1.0 / a.sqrt(),
            eps_coef: (1.0 - a) / (1.0 - sched.gamma(t)).sqrt(),
            noise_coef: (1.0 - a).sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        assert_eq!(s.gamma(1), 0.98);
        assert_eq!(s.gamma(1), s.alpha(1));
    }

    #[test]
    fn default_schedule_tail_matches_direct_product() {
        let s = ScheduleConfig::default().build().unwrap();
        // Independent oracle: recompute each beta from its index and multiply.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.gamma(1000) - prod).abs() < 1e-12);
        assert!((s.gamma(1000) - 4.0e-5).abs() < 0.1e-5, "gamma_T = {}", s.gamma(1000));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_edge_cases() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::<f64>::new(&[4], vec![0.5, -1.0, 0.25, 1.0]).unwrap();
        let zeros = Tensor::zeros(&[4]);
        let out = forward_sample(&x0, 300, &zeros, &s).unwrap();
        let g = s.gamma(300).sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, g * x);
        }
        let eps = Tensor::<f64>::new(&[4], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let out = forward_sample(&zeros, 300, &eps, &s).unwrap();
        let k = (1.0 - s.gamma(300)).sqrt();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert_eq!(*o, k * e);
        }
        assert!(forward_sample(&x0, 0, &eps, &s).is_err());
        assert!(forward_sample(&x0, 1001, &eps, &s).is_err());
        assert!(forward_sample(&x0, 1, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn reverse_step_hand_evaluated() {
        // alpha = 0.99, gamma = 0.5: pick betas so that t = 2 has these values.
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.5 / 0.99, 0.01]).unwrap();
        assert_relative_eq!(s.gamma(2), 0.5, epsilon = 1e-15);
        let xt = Tensor::<f64>::full(&[3], 1.0);
        let eh = Tensor::full(&[3], 0.5);
        let z = Tensor::zeros(&[3]);
        let out = reverse_step(&xt, &eh, 2, &s, &z).unwrap();
        // (1/sqrt(.99)) * (1 - (.01/sqrt(.5)) * .5)
        let want = (1.0 - 0.01 / 0.5f64.sqrt() * 0.5) / 0.99f64.sqrt();
        for &o in out.data() {
            assert_relative_eq!(o, want, epsilon = 1e-12);
            assert!((o - 0.99793).abs() < 1e-5);
        }
    }

    #[test]
    fn reverse_step_with_zero_prediction_rescales() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::<f64>::randn(&[16], &mut rng);
        let zeros = Tensor::zeros(&[16]);
        let out = reverse_step(&xt, &zeros, 700, &s, &zeros).unwrap();
        let inv = 1.0 / s.alpha(700).sqrt();
        for (o, x) in out.data().iter().zip(xt.data()) {
            assert_eq!(*o, inv * x);
        }
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.4) {
            let hi = (lo + span).min(0.99);
            let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
            prop_assert_eq!(s.betas().len(), steps);
            prop_assert_eq!(s.gamma(1), s.alpha(1));
            for t in 1..=steps {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
                if t >= 2 {
                    prop_assert!((s.gamma(t) - s.gamma(t - 1) * s.alpha(t)).abs() <= 1e-12);
                    prop_assert!(s.gamma(t) < s.gamma(t - 1));
                }
            }
        }

        #[test]
        fn reverse_step_is_linear_without_noise(a in -4.0f64..4.0, t in 1usize..=1000, seed in 0u64..1000) {
            let s = ScheduleConfig::default().build().unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let xt = Tensor::<f64>::randn(&[8], &mut rng);
            let eh = Tensor::<f64>::randn(&[8], &mut rng);
            let z = Tensor::zeros(&[8]);
            let base = reverse_step(&xt, &eh, t, &s, &z).unwrap();
            let scaled = reverse_step(&xt.map(|v| a * v), &eh.map(|v| a * v), t, &s, &z).unwrap();
            for (u, v) in scaled.data().iter().zip(base.data()) {
                prop_assert!((u - a * v).abs() <= 1e-9 * (1.0 + v.abs() * a.abs()));
            }
            let again = reverse_step(&xt, &eh, t, &s, &z).unwrap();
            prop_assert_eq!(again, base);
        }
    }
}
