use ndarray::{Array2, Zip};
use num_complex::Complex64;

use super::{Denoiser, Prediction, Schedule};
use crate::error::{Error, Result};
use crate::spectral::Spectrogram;

/// Test double that knows the clean signal and inverts the forward noising
/// exactly: `ε̂ = (x_t − sqrt(ᾱ_t)·x0) / sqrt(1 − ᾱ_t)`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    clean: Spectrogram,
    sched: Schedule,
}

impl OracleDenoiser {
    pub fn new(clean: Spectrogram, sched: Schedule) -> Self {
        Self { clean, sched }
    }

    pub fn clean(&self) -> &Spectrogram {
        &self.clean
    }

    fn check(&self, x_t: &Spectrogram, t: usize) -> Result<()> {
        x_t.check_same_shape(&self.clean, "oracle clean signal")?;
        if t > self.sched.n_steps() {
            return Err(Error::invalid(format!("step {t} outside 0..={}", self.sched.n_steps())));
        }
        Ok(())
    }
}

impl Denoiser for OracleDenoiser {
    fn estimate_noise(&mut self, x_t: &Spectrogram, t: usize) -> Result<Spectrogram> {
        self.check(x_t, t)?;
        if t == 0 {
            return Ok(x_t.scaled(0.0));
        }
        let a = self.sched.alpha_bar(t).sqrt();
        let b = (1.0 - self.sched.alpha_bar(t)).sqrt();
        let mut out = x_t.data().clone();
        Zip::from(&mut out).and(self.clean.data()).for_each(|o, &c| *o = (*o - c * a) / b);
        Ok(x_t.with_data(out))
    }

    fn supports_vjp(&self) -> bool {
        true
    }

    fn noise_vjp(&mut self, x_t: &Spectrogram, t: usize, cotangent: &Spectrogram) -> Result<Spectrogram> {
        self.check(x_t, t)?;
        if t == 0 {
            return Ok(cotangent.scaled(0.0));
        }
        Ok(cotangent.scaled(1.0 / (1.0 - self.sched.alpha_bar(t)).sqrt()))
    }

    /// The posterior mean is the stored clean signal itself.
    fn predict(&mut self, x_t: &Spectrogram, t: usize, _sched: &Schedule) -> Result<Prediction> {
        let noise = self.estimate_noise(x_t, t)?;
        Ok(Prediction { noise, clean: self.clean.clone() })
    }

    fn clean_vjp(&mut self, x_t: &Spectrogram, t: usize, _sched: &Schedule, cotangent: &Spectrogram) -> Result<Spectrogram> {
        self.check(x_t, t)?;
        Ok(cotangent.scaled(0.0))
    }
}

/// Prior variance per real component of each bin.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorVariance {
    Scalar(f64),
    PerBin(Array2<f64>),
}

/// Exact MMSE denoiser for a zero-mean circular Gaussian prior with
/// per-component variance `v`: `E[x0 | x_t] = sqrt(ᾱ)·v / (ᾱ·v + 1 − ᾱ) · x_t`.
#[derive(Debug, Clone)]
pub struct GaussianPriorDenoiser {
    variance: PriorVariance,
    sched: Schedule,
}

impl GaussianPriorDenoiser {
    pub fn new(variance: PriorVariance, sched: Schedule) -> Result<Self> {
        let ok = |v: f64| v >= 0.0 && !v.is_nan();
        let valid = match &variance {
            PriorVariance::Scalar(v) => ok(*v),
            PriorVariance::PerBin(m) => m.iter().all(|&v| ok(v)),
        };
        if !valid {
            return Err(Error::invalid("prior variance must be non-negative"));
        }
        Ok(Self { variance, sched })
    }

    pub fn scalar(v: f64, sched: Schedule) -> Result<Self> {
        Self::new(PriorVariance::Scalar(v), sched)
    }

    /// `(shrink, noise)` gains with `x̂0 = shrink·x_t`, `ε̂ = noise·x_t`.
    fn gains(&self, v: f64, t: usize) -> (f64, f64) {
        let ab = self.sched.alpha_bar(t);
        let (a, b2) = (ab.sqrt(), 1.0 - ab);
        if v.is_infinite() {
            return (1.0 / a, 0.0);
        }
        let den = ab * v + b2;
        if den == 0.0 {
            return (0.0, 0.0);
        }
        let noise = if b2 == 0.0 { 0.0 } else { b2.sqrt() / den };
        (a * v / den, noise)
    }

    fn map(&self, x: &Spectrogram, t: usize, pick: impl Fn((f64, f64)) -> f64) -> Result<Spectrogram> {
        if t > self.sched.n_steps() {
            return Err(Error::invalid(format!("step {t} outside 0..={}", self.sched.n_steps())));
        }
        let out = match &self.variance {
            PriorVariance::Scalar(v) => {
                let g = pick(self.gains(*v, t));
                x.data().mapv(|z| z * g)
            }
            PriorVariance::PerBin(m) => {
                if m.dim() != x.shape() {
                    return Err(Error::invalid(format!(
                        "prior variance is {:?}, signal is {:?}",
                        m.dim(),
                        x.shape()
                    )));
                }
                let mut out = x.data().clone();
                Zip::from(&mut out).and(m).for_each(|o: &mut Complex64, &v| *o *= pick(self.gains(v, t)));
                out
            }
        };
        Ok(x.with_data(out))
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn estimate_noise(&mut self, x_t: &Spectrogram, t: usize) -> Result<Spectrogram> {
        self.map(x_t, t, |g| g.1)
    }

    fn supports_vjp(&self) -> bool {
        true
    }

    fn noise_vjp(&mut self, _x_t: &Spectrogram, t: usize, cotangent: &Spectrogram) -> Result<Spectrogram> {
        self.map(cotangent, t, |g| g.1)
    }

    fn predict(&mut self, x_t: &Spectrogram, t: usize, _sched: &Schedule) -> Result<Prediction> {
        Ok(Prediction { noise: self.map(x_t, t, |g| g.1)?, clean: self.map(x_t, t, |g| g.0)? })
    }

    fn clean_vjp(&mut self, _x_t: &Spectrogram, t: usize, _sched: &Schedule, cotangent: &Spectrogram) -> Result<Spectrogram> {
        self.map(cotangent, t, |g| g.0)
    }
}
