//! Noise schedules, the forward process, ancestral sampling and the
//! single-step `x0` estimate.
//!
//! Timesteps are 1-based throughout: `t` ranges over `1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_sigma: Vec<f64>,
}

/// Serializable schedule description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Linear betas rescaled by `1000 / steps`, so the terminal signal level
    /// `alpha_bar[T]` matches the classic 1000-step schedule.
    pub fn rescaled(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * k,
            beta_end: 0.02 * k,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::rescaled(100)
    }
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`, endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            posterior_sigma,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// A `steps`-step schedule visiting a subset of this one's timesteps.
    ///
    /// Returns the new schedule and, for each of its steps `k`, the
    /// original timestep `tau[k - 1]` the model should be told. The
    /// cumulative products agree: `new.alpha_bar(k) == self.alpha_bar(tau)`.
    pub fn respaced(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::Schedule(format!("cannot respace {total} steps into {steps}")));
        }
        let tau: Vec<usize> = (1..=steps).map(|k| (k * total).div_ceil(steps)).collect();
        let mut prev = 1.0;
        let beta = tau
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((Self::from_betas(beta), tau))
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Posterior standard deviation used by the ancestral step.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        self.posterior_sigma[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Schedule(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar[t])·x0 + sqrt(1 - alpha_bar[t])·eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Single-step reconstruction of `x0` from `x_t` and a noise estimate,
/// before clamping.
pub fn predict_x0_unclamped(
    tape: &Tape,
    x_t: &Var,
    eps_hat: &Var,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Var> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let noise = tape.scale(eps_hat, (1.0 - ab).sqrt())?;
    let diff = tape.sub(x_t, &noise)?;
    tape.scale(&diff, 1.0 / ab.sqrt())
}

/// Single-step reconstruction of `x0`, clamped to the image range `[-1, 1]`.
pub fn predict_x0(tape: &Tape, x_t: &Var, eps_hat: &Var, t: usize, s: &NoiseSchedule) -> Result<Var> {
    let raw = predict_x0_unclamped(tape, x_t, eps_hat, t, s)?;
    tape.clamp(&raw, -1.0, 1.0)
}

/// Detached convenience form of [`predict_x0`].
pub fn predict_x0_single_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::new();
    let out = predict_x0(&tape, &tape.constant(x_t.clone()), &tape.constant(eps_hat.clone()), t, s)?;
    Ok(out.into_value())
}

/// One ancestral denoising step. `z` is ignored at `t == 1`.
pub fn ddpm_step_var(
    tape: &Tape,
    x_t: &Var,
    eps_hat: &Var,
    t: usize,
    z: &Tensor,
    s: &NoiseSchedule,
) -> Result<Var> {
    s.check_t(t)?;
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let noise = tape.scale(eps_hat, coef)?;
    let diff = tape.sub(x_t, &noise)?;
    let mean = tape.scale(&diff, 1.0 / s.alpha(t).sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = s.posterior_sigma(t);
    let kick = tape.constant(z.map(|v| sigma * v));
    tape.add(&mean, &kick)
}

pub fn ddpm_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::new();
    let out = ddpm_step_var(&tape, &tape.constant(x_t.clone()), &tape.constant(eps_hat.clone()), t, z, s)?;
    Ok(out.into_value())
}

/// Image condition plus caption id: the `(c_v, c_t)` pair a denoiser is
/// conditioned on.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub hint: Tensor,
    pub caption: usize,
}

/// A noise-prediction model `eps(x_t, t, c_t, c_v)`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, tape: &Tape, x_t: &Var, t: usize, cond: &Conditioning) -> Result<Var>;
}

/// The initial noise `x_T` for a sampling run.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    rng::normal_tensor(shape, &mut rng::stream(seed, &[tag::SAMPLE_INIT]))
}

/// The ancestral noise injected at step `t`.
pub fn step_noise(shape: &[usize], seed: u64, t: usize) -> Tensor {
    rng::normal_tensor(shape, &mut rng::stream(seed, &[tag::SAMPLE_STEP, t as u64]))
}

/// Generates an image from seeded noise by `T` ancestral steps. The result
/// is clamped to `[-1, 1]`.
pub fn sample_full(
    model: &dyn NoisePredictor,
    cond: &Conditioning,
    shape: &[usize],
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut x = initial_noise(shape, seed);
    for t in (1..=s.steps()).rev() {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let eps = model.predict_noise(&tape, &xv, t, cond)?;
        let z = if t > 1 {
            step_noise(shape, seed, t)
        } else {
            Tensor::zeros(shape)
        };
        x = ddpm_step(&x, eps.value(), t, &z, s)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn respacing_keeps_cumulative_products() {
        let s = ScheduleConfig::default().build().unwrap();
        let (r, tau) = s.respaced(7).unwrap();
        assert_eq!(tau.len(), 7);
        assert_eq!(*tau.last().unwrap(), 100);
        for (k, &t) in tau.iter().enumerate() {
            assert!((r.alpha_bar(k + 1) - s.alpha_bar(t)).abs() < 1e-12);
        }
        let (same, tau) = s.respaced(100).unwrap();
        assert_eq!(tau, (1..=100).collect::<Vec<_>>());
        for t in 1..=100 {
            assert!((same.beta(t) - s.beta(t)).abs() < 1e-12);
        }
        assert!(s.respaced(0).is_err() && s.respaced(101).is_err());
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.01, 0.01).unwrap();
        assert!((s.alpha_bar(1) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_is_decreasing_and_starts_near_one() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bar(1) > 0.99);
        for t in 1..100 {
            assert!(s.alpha_bar(t + 1) - s.alpha_bar(t) < 0.0);
        }
        // terminal signal comparable to the 1000-step schedule
        let reference = ScheduleConfig::rescaled(1000).build().unwrap();
        assert!(s.alpha_bar(100) < 1e-3);
        assert!(reference.alpha_bar(1000) < 1e-3);
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..10 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 9.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(10) - prod).abs() < 1e-12);
    }

    #[test]
    fn posterior_sigma_matches_independent_recompute() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let betas: Vec<f64> = (0..50).map(|i| 1e-3 + (0.05 - 1e-3) * i as f64 / 49.0).collect();
        for t in 1..=50 {
            let ab = |k: usize| betas[..k].iter().map(|b| 1.0 - b).product::<f64>();
            let var = (1.0 - ab(t - 1)) / (1.0 - ab(t)) * betas[t - 1];
            assert!((s.posterior_sigma(t).powi(2) - var).abs() < 1e-12, "t={t}");
        }
        assert_eq!(s.posterior_sigma(1), 0.0);
    }

    #[test]
    fn zero_noise_diffusion_scales_input() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 / 16.0) - 0.5);
        let xt = forward_diffuse(&x0, 30, &Tensor::zeros(&[1, 4, 4]), &s).unwrap();
        let k = s.alpha_bar(30).sqrt();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, k * b);
        }
    }

    #[test]
    fn tiny_noise_leaves_image_nearly_intact() {
        let s = NoiseSchedule::linear(10, 1e-6, 1e-3).unwrap();
        let mut r = rng::stream(1, &[0]);
        let x0 = Tensor::from_fn(&[1, 4, 4], |i| ((i * 7) % 5) as f64 / 5.0 - 0.4);
        let eps = rng::normal_tensor(&[1, 4, 4], &mut r);
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let diff = xt.zip_map(&x0, |a, b| a - b).unwrap();
        assert!(diff.l2_norm() < 1e-2 * x0.l2_norm());
    }

    #[test]
    fn forward_diffuse_rejects_mismatch_and_bad_t() {
        let s = ScheduleConfig::default().build().unwrap();
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(forward_diffuse(&x, 1, &Tensor::zeros(&[1, 2, 3]), &s).is_err());
        assert!(forward_diffuse(&x, 0, &x, &s).is_err());
        assert!(forward_diffuse(&x, 101, &x, &s).is_err());
    }

    #[test]
    fn forward_variance_matches_schedule() {
        // Monte Carlo over 10^4 noise draws for a fixed x0.
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 0.3 - 0.4);
        let t = 40;
        let n = 10_000;
        let mut r = rng::stream(3, &[0]);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let eps = rng::normal_tensor(&[1, 2, 2], &mut r);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for (i, v) in xt.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let want = 1.0 - s.alpha_bar(t);
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((var - want).abs() / want < 0.05, "pixel {i}: {var} vs {want}");
        }
    }

    #[test]
    fn exact_noise_recovers_x0_at_every_t() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut r = rng::stream(4, &[0]);
        let x0 = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 / 8.0) - 1.0);
        let eps = rng::normal_tensor(&[1, 4, 4], &mut r);
        for t in 1..=s.steps() {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let tape = Tape::new();
            let rec = predict_x0_unclamped(&tape, &tape.constant(xt), &tape.constant(eps.clone()), t, &s)
                .unwrap();
            assert!(rec.value().max_abs_diff(&x0) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn zero_noise_estimate_is_scaled_and_clamped() {
        let s = ScheduleConfig::default().build().unwrap();
        let xt = Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 0.4 - 0.5);
        let t = 60;
        let got = predict_x0_single_step(&xt, &Tensor::zeros(&[1, 2, 2]), t, &s).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (g, x) in got.data().iter().zip(xt.data()) {
            assert!((*g - (x / k).clamp(-1.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn perturbed_noise_error_follows_closed_form() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut r = rng::stream(5, &[0]);
        let x0 = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 / 32.0) - 0.25);
        let eps = rng::normal_tensor(&[1, 4, 4], &mut r);
        let delta = rng::normal_tensor(&[1, 4, 4], &mut r).map(|v| 0.01 * v);
        let eps_hat = eps.zip_map(&delta, |a, b| a + b).unwrap();
        for t in [1, 50, 100] {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let tape = Tape::new();
            let rec = predict_x0_unclamped(&tape, &tape.constant(xt), &tape.constant(eps_hat.clone()), t, &s)
                .unwrap();
            let err = rec.value().zip_map(&x0, |a, b| a - b).unwrap().l2_norm();
            let ab = s.alpha_bar(t);
            let want = ((1.0 - ab) / ab).sqrt() * delta.l2_norm();
            assert!((err - want).abs() < 1e-9 * want.max(1.0), "t={t}");
        }
    }

    #[test]
    fn last_step_adds_no_noise() {
        let s = NoiseSchedule::linear(5, 0.01, 0.1).unwrap();
        let x = Tensor::full(&[1, 2, 2], 0.3);
        let e = Tensor::full(&[1, 2, 2], 0.1);
        let a = ddpm_step(&x, &e, 1, &Tensor::full(&[1, 2, 2], 5.0), &s).unwrap();
        let b = ddpm_step(&x, &e, 1, &Tensor::zeros(&[1, 2, 2]), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_chain_inverts_forward_process() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let x0 = Tensor::from_fn(&[1, 3, 3], |i| i as f64 / 9.0 - 0.5);
        let eps = rng::normal_tensor(&[1, 3, 3], &mut rng::stream(6, &[0]));
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let back = ddpm_step(&x1, &eps, 1, &Tensor::zeros(&[1, 3, 3]), &s).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-9);
    }

    struct Counting(AtomicUsize);
    impl NoisePredictor for Counting {
        fn predict_noise(&self, tape: &Tape, x: &Var, _t: usize, _c: &Conditioning) -> Result<Var> {
            self.0.fetch_add(1, Ordering::Relaxed);
            tape.scale(x, 0.5)
        }
    }

    /// Returns the exact noise that produced `x_t` from a fixed `x0`.
    struct Planted {
        x0: Tensor,
        schedule: NoiseSchedule,
    }
    impl NoisePredictor for Planted {
        fn predict_noise(&self, tape: &Tape, x: &Var, t: usize, _c: &Conditioning) -> Result<Var> {
            let ab = self.schedule.alpha_bar(t);
            let eps = x
                .value()
                .zip_map(&self.x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())?;
            Ok(tape.constant(eps))
        }
    }

    fn cond() -> Conditioning {
        Conditioning {
            hint: Tensor::zeros(&[1, 4, 4]),
            caption: 0,
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = NoiseSchedule::linear(8, 0.01, 0.2).unwrap();
        let m = Counting(AtomicUsize::new(0));
        let a = sample_full(&m, &cond(), &[1, 4, 4], &s, 11).unwrap();
        let b = sample_full(&m, &cond(), &[1, 4, 4], &s, 11).unwrap();
        let c = sample_full(&m, &cond(), &[1, 4, 4], &s, 12).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn one_step_schedule_calls_model_once() {
        let s = NoiseSchedule::linear(1, 0.01, 0.01).unwrap();
        let m = Counting(AtomicUsize::new(0));
        sample_full(&m, &cond(), &[1, 4, 4], &s, 0).unwrap();
        assert_eq!(m.0.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn planted_trajectory_lands_on_x0() {
        let s = NoiseSchedule::linear(3, 0.05, 0.3).unwrap();
        let x0 = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 / 16.0) * 1.6 - 0.8);
        let m = Planted {
            x0: x0.clone(),
            schedule: s.clone(),
        };
        let out = sample_full(&m, &cond(), &[1, 4, 4], &s, 9).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6);
    }
}
