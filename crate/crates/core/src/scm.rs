//! Multichannel noise estimation and the per-bin noise spatial covariance
//! (SCM) field used by the likelihood term.

use ndarray::{s, Array3, Array4, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fcp::{apply_atf, AtfFilter};
use crate::linalg;
use crate::spectral::{MultiSpectrogram, Spectrogram};

pub const DEFAULT_ETA: f64 = 0.95;
pub const DEFAULT_LOAD_DELTA: f64 = 1e-4;
pub const LOAD_EPS_ABS: f64 = 1e-10;

/// One `C × C` Hermitian matrix per `(frame, frequency)`, stored `L × F × C × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmField {
    cov: Array4<Complex64>,
    pub eta: f64,
    pub load_delta: f64,
}

impl ScmField {
    /// Wraps an `L × F × C × C` tensor, symmetrizing every slice.
    pub fn new(mut cov: Array4<Complex64>, eta: f64, load_delta: f64) -> Result<Self> {
        let (_, _, c1, c2) = cov.dim();
        if c1 != c2 || c1 == 0 {
            return Err(Error::invalid("SCM slices must be square and non-empty"));
        }
        if cov.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("SCM contains non-finite entries"));
        }
        for mut slice in cov.outer_iter_mut() {
            for mut m in slice.outer_iter_mut() {
                let s = m.as_slice_mut().expect("standard layout");
                linalg::symmetrize(s, c1);
            }
        }
        Ok(Self { cov, eta, load_delta })
    }

    /// `scale · I` on every bin.
    pub fn identity(n_frames: usize, n_freqs: usize, n_channels: usize, scale: f64) -> Self {
        let cov = Array4::from_shape_fn((n_frames, n_freqs, n_channels, n_channels), |(_, _, i, j)| {
            if i == j {
                Complex64::new(scale, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        Self { cov, eta: 0.0, load_delta: DEFAULT_LOAD_DELTA }
    }

    pub fn cov(&self) -> &Array4<Complex64> {
        &self.cov
    }

    pub fn n_frames(&self) -> usize {
        self.cov.dim().0
    }

    pub fn n_freqs(&self) -> usize {
        self.cov.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.cov.dim().2
    }

    /// Row-major copy of the slice at `(frame, freq)`.
    pub fn slice(&self, frame: usize, freq: usize) -> Vec<Complex64> {
        self.cov.index_axis(Axis(0), frame).index_axis(Axis(0), freq).iter().copied().collect()
    }

    fn check_matches(&self, noise: &MultiSpectrogram) -> Result<()> {
        if (self.n_frames(), self.n_freqs(), self.n_channels()) != (noise.n_frames(), noise.n_freqs(), noise.n_channels()) {
            return Err(Error::invalid(format!(
                "SCM field is {}x{}x{}, noise is {}x{}x{} (frames x freqs x channels)",
                self.n_frames(),
                self.n_freqs(),
                self.n_channels(),
                noise.n_frames(),
                noise.n_freqs(),
                noise.n_channels()
            )));
        }
        Ok(())
    }
}

/// `Y − Σ_k apply_atf(sources[k], filters[k])`.
pub fn estimate_noise(mixture: &MultiSpectrogram, sources: &[Spectrogram], filters: &[AtfFilter]) -> Result<MultiSpectrogram> {
    if sources.is_empty() || sources.len() != filters.len() {
        return Err(Error::invalid(format!(
            "need one filter per source, got {} sources and {} filters",
            sources.len(),
            filters.len()
        )));
    }
    let mut noise = mixture.data().clone();
    for (k, (s, h)) in sources.iter().zip(filters).enumerate() {
        if !mixture.matches(s) || h.n_channels() != mixture.n_channels() {
            return Err(Error::invalid(format!("source {k} does not match the mixture")));
        }
        noise -= apply_atf(s, h)?.data();
    }
    Ok(MultiSpectrogram::from_raw(noise, mixture.params()))
}

/// Exponential moving average of noise outer products over frames,
/// `Φ(l) = η Φ(l−1) + (1−η) n(l) n(l)^H`, started at `Φ(0) = n(0) n(0)^H`.
pub fn scm_ema(noise: &MultiSpectrogram, eta: f64) -> Result<ScmField> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must be in [0, 1), got {eta}")));
    }
    let (c, f, l) = noise.data().dim();
    let per_freq: Vec<Vec<Complex64>> = (0..f)
        .into_par_iter()
        .map(|fi| {
            let mut out = vec![Complex64::new(0.0, 0.0); l * c * c];
            let mut phi = vec![Complex64::new(0.0, 0.0); c * c];
            let mut n = vec![Complex64::new(0.0, 0.0); c];
            for li in 0..l {
                for (ch, v) in n.iter_mut().enumerate() {
                    *v = noise.data()[[ch, fi, li]];
                }
                for i in 0..c {
                    for j in 0..c {
                        let outer = n[i] * n[j].conj();
                        phi[i * c + j] = if li == 0 { outer } else { phi[i * c + j] * eta + outer * (1.0 - eta) };
                    }
                }
                linalg::symmetrize(&mut phi, c);
                out[li * c * c..(li + 1) * c * c].copy_from_slice(&phi);
            }
            out
        })
        .collect();
    let mut cov = Array4::zeros((l, f, c, c));
    for (fi, block) in per_freq.iter().enumerate() {
        for li in 0..l {
            for i in 0..c {
                for j in 0..c {
                    cov[[li, fi, i, j]] = block[li * c * c + i * c + j];
                }
            }
        }
    }
    Ok(ScmField { cov, eta, load_delta: DEFAULT_LOAD_DELTA })
}

/// Diagonally loads every slice by `load_delta · trace / C + 1e-10` and inverts it.
pub fn scm_inverse(field: &ScmField) -> Result<ScmField> {
    if field.cov.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid("SCM contains non-finite entries"));
    }
    if !(field.load_delta >= 0.0) {
        return Err(Error::invalid("diagonal loading must be non-negative"));
    }
    let (l, f, c, _) = field.cov.dim();
    let inverted: Vec<Result<Vec<Complex64>>> = (0..l * f)
        .into_par_iter()
        .map(|idx| {
            let (li, fi) = (idx / f, idx % f);
            let mut a = field.slice(li, fi);
            linalg::symmetrize(&mut a, c);
            let trace: f64 = (0..c).map(|i| a[i * c + i].re).sum();
            let load = field.load_delta * trace / c as f64 + LOAD_EPS_ABS;
            for i in 0..c {
                a[i * c + i] += load;
            }
            linalg::hpd_inverse(&a, c).ok_or_else(|| {
                Error::Numerical(format!("SCM slice at frame {li}, freq {fi} is not positive definite"))
            })
        })
        .collect();
    let mut cov = Array4::zeros((l, f, c, c));
    for (idx, inv) in inverted.into_iter().enumerate() {
        let inv = inv?;
        let (li, fi) = (idx / f, idx % f);
        for i in 0..c {
            for j in 0..c {
                cov[[li, fi, i, j]] = inv[i * c + j];
            }
        }
    }
    Ok(ScmField { cov, eta: field.eta, load_delta: field.load_delta })
}

/// `Φ⁻¹(l, f) · N(l, f)` for every bin.
pub fn apply_inverse(noise: &MultiSpectrogram, inv_field: &ScmField) -> Result<MultiSpectrogram> {
    inv_field.check_matches(noise)?;
    let (c, f, l) = noise.data().dim();
    let cov = inv_field.cov.as_standard_layout();
    let cov = cov.as_slice().expect("standard layout");
    let data = noise.data().as_standard_layout();
    let data = data.as_slice().expect("standard layout");
    let mut out = vec![Complex64::new(0.0, 0.0); c * f * l];
    let plane = f * l;
    for li in 0..l {
        for fi in 0..f {
            let m = &cov[(li * f + fi) * c * c..][..c * c];
            let at = fi * l + li;
            for i in 0..c {
                let row = &m[i * c..][..c];
                out[i * plane + at] = (0..c).map(|j| row[j] * data[j * plane + at]).sum();
            }
        }
    }
    let out = Array3::from_shape_vec((c, f, l), out).expect("shape");
    Ok(MultiSpectrogram::from_raw(out, noise.params()))
}

/// `Σ_{l,f} N(l,f)^H Φ⁻¹(l,f) N(l,f)`, checked to be real.
pub fn quadratic_form(noise: &MultiSpectrogram, inv_field: &ScmField) -> Result<f64> {
    let weighted = apply_inverse(noise, inv_field)?;
    let rows = complex_rows(noise, &weighted);
    let total: Complex64 = rows.iter().sum();
    check_real(total)?;
    Ok(total.re)
}

/// Contribution of each frequency to [`quadratic_form`].
pub fn quadratic_form_per_freq(noise: &MultiSpectrogram, inv_field: &ScmField) -> Result<Vec<f64>> {
    let weighted = apply_inverse(noise, inv_field)?;
    complex_rows(noise, &weighted)
        .into_iter()
        .map(|z| check_real(z).map(|_| z.re))
        .collect()
}

fn complex_rows(noise: &MultiSpectrogram, weighted: &MultiSpectrogram) -> Vec<Complex64> {
    let (c, f, _) = noise.data().dim();
    (0..f)
        .map(|fi| {
            let mut part = Complex64::new(0.0, 0.0);
            for ch in 0..c {
                let a = noise.data().slice(s![ch, fi, ..]);
                let b = weighted.data().slice(s![ch, fi, ..]);
                part += a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum::<Complex64>();
            }
            part
        })
        .collect()
}

fn check_real(z: Complex64) -> Result<()> {
    if !z.re.is_finite() || z.im.abs() >= 1e-8 * z.re.abs() + 1e-12 {
        return Err(Error::Numerical(format!("quadratic form is not real: {z}")));
    }
    Ok(())
}
