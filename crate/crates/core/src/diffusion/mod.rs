//! DDPM schedule, forward noising, the reverse prior step, one-step MMSE
//! denoising and the denoiser interface.
//!
//! Time steps are 1-based: `t ∈ 1..=T`, with the convention `ᾱ_0 = 1` so that
//! step 0 is the clean signal.

mod denoisers;
mod external;
pub mod protocol;

pub use denoisers::{GaussianPriorDenoiser, OracleDenoiser, PriorVariance};
pub use external::{ExternalDenoiser, DEFAULT_TIMEOUT};

use ndarray::Zip;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::complex_normal;
use crate::spectral::Spectrogram;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear-β DDPM schedule. Arrays are indexed by `t − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl Schedule {
    pub fn linear(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let span = (beta_end - beta_start) / (n_steps - 1) as f64;
        let mut beta: Vec<f64> = (0..n_steps).map(|i| beta_start + span * i as f64).collect();
        beta[n_steps - 1] = beta_end;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = (0..n_steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.n_steps())));
        }
        Ok(())
    }

    /// Panics unless `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Panics unless `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`. Panics for `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Panics unless `1 <= t <= T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Coefficients for a reverse step from `t` to `t_prev < t`. For
    /// `t_prev = t − 1` these are the schedule's own values; larger jumps use
    /// the effective `α = ᾱ_t / ᾱ_{t_prev}`.
    pub fn transition(&self, t: usize, t_prev: usize) -> Result<Transition> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::invalid(format!("reverse step must go down, got {t} -> {t_prev}")));
        }
        let alpha_bar = self.alpha_bar(t);
        let alpha_bar_prev = self.alpha_bar(t_prev);
        let (alpha, sigma) = if t_prev + 1 == t {
            (self.alpha(t), self.sigma(t))
        } else {
            let alpha = alpha_bar / alpha_bar_prev;
            (alpha, ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha)).sqrt())
        };
        Ok(Transition { t, t_prev, alpha, alpha_bar, sigma })
    }
}

/// Coefficients of one reverse step `t → t_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub t_prev: usize,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

/// Steps visited by a reverse chain starting at `t_start` with the given
/// stride, paired with the step each one moves to. Empty for `t_start = 0`.
pub fn reverse_steps(t_start: usize, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    let mut t = t_start;
    while t > 0 {
        let prev = t.saturating_sub(stride);
        out.push((t, prev));
        t = prev;
    }
    out
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε` for a given `ε`.
pub fn forward_with_noise(x0: &Spectrogram, eps: &Spectrogram, t: usize, sched: &Schedule) -> Result<Spectrogram> {
    sched.check(t)?;
    x0.check_same_shape(eps, "forward noise")?;
    let a = sched.alpha_bar(t).sqrt();
    let b = (1.0 - sched.alpha_bar(t)).sqrt();
    let mut out = x0.data().clone();
    Zip::from(&mut out).and(eps.data()).for_each(|o, &e| *o = *o * a + e * b);
    Ok(x0.with_data(out))
}

/// Forward noising with `ε ~ CN(0, 2I)` drawn from `rng`.
pub fn forward_to_step<R: Rng + ?Sized>(x0: &Spectrogram, t: usize, sched: &Schedule, rng: &mut R) -> Result<Spectrogram> {
    sched.check(t)?;
    let eps = x0.with_data(complex_normal(rng, x0.n_freqs(), x0.n_frames()));
    forward_with_noise(x0, &eps, t, sched)
}

/// Reverse step with explicit noise `z`:
/// `(x_t − (1−α)/sqrt(1−ᾱ_t)·ε̂) / sqrt(α) + σ·z`.
pub fn prior_step_with_noise(x_t: &Spectrogram, eps_hat: &Spectrogram, step: &Transition, z: &Spectrogram) -> Result<Spectrogram> {
    x_t.check_same_shape(eps_hat, "noise estimate")?;
    x_t.check_same_shape(z, "prior-step noise")?;
    let c_eps = (1.0 - step.alpha) / (1.0 - step.alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / step.alpha.sqrt();
    let mut out = x_t.data().clone();
    Zip::from(&mut out)
        .and(eps_hat.data())
        .and(z.data())
        .for_each(|o, &e, &n| *o = (*o - e * c_eps) * inv_sqrt_alpha + n * step.sigma);
    Ok(x_t.with_data(out))
}

/// Stride-1 reverse step from `t` with noise drawn from `rng`. No noise is
/// drawn at `t = 1`, where `σ_1 = 0`.
pub fn prior_step<R: Rng + ?Sized>(x_t: &Spectrogram, eps_hat: &Spectrogram, t: usize, sched: &Schedule, rng: &mut R) -> Result<Spectrogram> {
    let step = sched.transition(t, t - 1)?;
    let z = if step.sigma == 0.0 {
        Spectrogram::from_raw(ndarray::Array2::zeros(x_t.shape()), x_t.params())
    } else {
        x_t.with_data(complex_normal(rng, x_t.n_freqs(), x_t.n_frames()))
    };
    prior_step_with_noise(x_t, eps_hat, &step, &z)
}

/// MMSE estimate `(x_t − sqrt(1−ᾱ_t)·ε̂) / sqrt(ᾱ_t)`; identity at `t = 0`.
pub fn one_step_denoise(x_t: &Spectrogram, eps_hat: &Spectrogram, t: usize, sched: &Schedule) -> Result<Spectrogram> {
    if t > sched.n_steps() {
        return Err(Error::invalid(format!("step {t} outside 0..={}", sched.n_steps())));
    }
    x_t.check_same_shape(eps_hat, "noise estimate")?;
    if t == 0 {
        return Ok(x_t.clone());
    }
    let a = sched.alpha_bar(t).sqrt();
    let b = (1.0 - sched.alpha_bar(t)).sqrt();
    let mut out = x_t.data().clone();
    Zip::from(&mut out).and(eps_hat.data()).for_each(|o, &e| *o = (*o - e * b) / a);
    Ok(x_t.with_data(out))
}

/// Noise estimate and matching clean estimate for one diffusion state.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub noise: Spectrogram,
    pub clean: Spectrogram,
}

/// A noise-prediction network `ε_θ(x_t, t)` operating in the compressed STFT
/// domain.
pub trait Denoiser: Send {
    fn estimate_noise(&mut self, x_t: &Spectrogram, t: usize) -> Result<Spectrogram>;

    /// Whether [`Denoiser::noise_vjp`] is available.
    fn supports_vjp(&self) -> bool {
        false
    }

    /// `J_ε(x_t)^T · cotangent` in the real-gradient convention.
    fn noise_vjp(&mut self, _x_t: &Spectrogram, _t: usize, _cotangent: &Spectrogram) -> Result<Spectrogram> {
        Err(Error::Capability("denoiser does not provide a vector-Jacobian product".into()))
    }

    /// Noise estimate plus the one-step clean estimate. Denoisers that know
    /// their posterior mean in closed form may return it directly.
    fn predict(&mut self, x_t: &Spectrogram, t: usize, sched: &Schedule) -> Result<Prediction> {
        let noise = self.estimate_noise(x_t, t)?;
        let clean = one_step_denoise(x_t, &noise, t, sched)?;
        Ok(Prediction { noise, clean })
    }

    /// Pull-back of `cotangent` through `x_t ↦ one_step_denoise(x_t, ε_θ(x_t, t), t)`.
    fn clean_vjp(&mut self, x_t: &Spectrogram, t: usize, sched: &Schedule, cotangent: &Spectrogram) -> Result<Spectrogram> {
        let a = sched.alpha_bar(t).sqrt();
        let b = (1.0 - sched.alpha_bar(t)).sqrt();
        let through_eps = self.noise_vjp(x_t, t, cotangent)?;
        let mut out = cotangent.data().clone();
        Zip::from(&mut out).and(through_eps.data()).for_each(|o, &e| *o = (*o - e * b) / a);
        Ok(cotangent.with_data(out))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn estimate_noise(&mut self, x_t: &Spectrogram, t: usize) -> Result<Spectrogram> {
        (**self).estimate_noise(x_t, t)
    }

    fn supports_vjp(&self) -> bool {
        (**self).supports_vjp()
    }

    fn noise_vjp(&mut self, x_t: &Spectrogram, t: usize, cotangent: &Spectrogram) -> Result<Spectrogram> {
        (**self).noise_vjp(x_t, t, cotangent)
    }

    fn predict(&mut self, x_t: &Spectrogram, t: usize, sched: &Schedule) -> Result<Prediction> {
        (**self).predict(x_t, t, sched)
    }

    fn clean_vjp(&mut self, x_t: &Spectrogram, t: usize, sched: &Schedule, cotangent: &Spectrogram) -> Result<Spectrogram> {
        (**self).clean_vjp(x_t, t, sched, cotangent)
    }
}

/// Denoiser that always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn estimate_noise(&mut self, x_t: &Spectrogram, _t: usize) -> Result<Spectrogram> {
        Ok(x_t.scaled(0.0))
    }

    fn supports_vjp(&self) -> bool {
        true
    }

    fn noise_vjp(&mut self, _x_t: &Spectrogram, _t: usize, cotangent: &Spectrogram) -> Result<Spectrogram> {
        Ok(cotangent.scaled(0.0))
    }
}
