//! STFT analysis/synthesis and the compressive magnitude transform.
//!
//! Analysis uses a periodic square-root Hann window; synthesis mirrors it and
//! normalizes the overlap-add by the summed squared window, which gives exact
//! reconstruction wherever that sum is non-zero. By default the DC bin is
//! dropped, so a spectrogram has `fft_size / 2` rows covering bins
//! `1..=fft_size/2`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Default magnitude clamp used by [`decompress_vjp`].
pub const DEFAULT_EPS_MAG: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Keep the DC bin as row 0 instead of dropping it.
    pub keep_dc: bool,
}

impl StftParams {
    pub fn new(fft_size: usize, hop: usize, sample_rate: u32) -> Self {
        Self { fft_size, hop, sample_rate, keep_dc: false }
    }

    pub fn with_dc(self) -> Self {
        Self { keep_dc: true, ..self }
    }

    pub fn without_dc(self) -> Self {
        Self { keep_dc: false, ..self }
    }

    /// Number of frequency rows a spectrogram with these parameters has.
    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + usize::from(self.keep_dc)
    }

    /// Frame count for a signal of `len` samples (final frame zero-padded).
    pub fn n_frames(&self, len: usize) -> usize {
        (len - self.fft_size).div_ceil(self.hop) + 1
    }

    /// Zeros added on each side by [`analyze`] so that every original sample
    /// lies where the window overlap is complete.
    pub fn edge_padding(&self) -> usize {
        self.fft_size - self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || !self.fft_size.is_power_of_two() {
            return Err(Error::invalid(format!("fft_size {} is not a power of two >= 2", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::invalid(format!("hop {} outside (0, {}]", self.hop, self.fft_size)));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }
}

impl Default for StftParams {
    fn default() -> Self {
        Self::new(512, 128, 16_000)
    }
}

/// Complex STFT of one signal, `F × L` (frequency rows, frame columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array2<Complex64>,
    params: StftParams,
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a Complex64>) -> bool {
    it.all(|z| z.re.is_finite() && z.im.is_finite())
}

impl Spectrogram {
    /// Wraps `data`, checking its row count against `params` and finiteness.
    pub fn new(data: Array2<Complex64>, params: StftParams) -> Result<Self> {
        if data.nrows() != params.n_freqs() {
            return Err(Error::invalid(format!(
                "spectrogram has {} rows, expected {} for fft_size {}",
                data.nrows(),
                params.n_freqs(),
                params.fft_size
            )));
        }
        if !all_finite(data.iter()) {
            return Err(Error::invalid("spectrogram contains non-finite values"));
        }
        Ok(Self { data, params })
    }

    pub(crate) fn from_raw(data: Array2<Complex64>, params: StftParams) -> Self {
        Self { data, params }
    }

    pub fn zeros(params: StftParams, n_frames: usize) -> Self {
        Self::from_raw(Array2::zeros((params.n_freqs(), n_frames)), params)
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn n_freqs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_freqs(), self.n_frames())
    }

    pub fn is_finite(&self) -> bool {
        all_finite(self.data.iter())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Array2<Complex64>) -> Self {
        assert_eq!(data.dim(), self.data.dim());
        Self::from_raw(data, self.params)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        self.with_data(self.data.mapv(f))
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Spectrogram) {
        self.data.scaled_add(Complex64::new(s, 0.0), &other.data);
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.data.dim() == other.data.dim()
    }

    pub(crate) fn check_same_shape(&self, other: &Spectrogram, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!("{what}: shape {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    /// Splits off the DC row of a `keep_dc` spectrogram.
    pub fn split_dc(&self) -> Result<(Vec<Complex64>, Spectrogram)> {
        if !self.params.keep_dc {
            return Err(Error::invalid("spectrogram has no DC row"));
        }
        let dc = self.data.row(0).to_vec();
        let rest = self.data.slice(ndarray::s![1.., ..]).to_owned();
        Ok((dc, Spectrogram::from_raw(rest, self.params.without_dc())))
    }

    /// Inverse of [`Spectrogram::split_dc`].
    pub fn join_dc(&self, dc: &[Complex64]) -> Result<Spectrogram> {
        if self.params.keep_dc || dc.len() != self.n_frames() {
            return Err(Error::invalid("DC row does not match spectrogram"));
        }
        let mut data = Array2::zeros((self.n_freqs() + 1, self.n_frames()));
        data.row_mut(0).assign(&ndarray::ArrayView1::from(dc));
        data.slice_mut(ndarray::s![1.., ..]).assign(&self.data);
        Ok(Spectrogram::from_raw(data, self.params.with_dc()))
    }
}

/// `C` spectrograms sharing one shape, stored as `C × F × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSpectrogram {
    data: Array3<Complex64>,
    params: StftParams,
}

impl MultiSpectrogram {
    pub fn new(data: Array3<Complex64>, params: StftParams) -> Result<Self> {
        if data.dim().0 == 0 {
            return Err(Error::invalid("multichannel spectrogram needs at least one channel"));
        }
        if data.dim().1 != params.n_freqs() {
            return Err(Error::invalid("multichannel spectrogram frequency count mismatch"));
        }
        if !all_finite(data.iter()) {
            return Err(Error::invalid("multichannel spectrogram contains non-finite values"));
        }
        Ok(Self { data, params })
    }

    pub(crate) fn from_raw(data: Array3<Complex64>, params: StftParams) -> Self {
        Self { data, params }
    }

    pub fn from_channels(channels: &[Spectrogram]) -> Result<Self> {
        let first = channels.first().ok_or_else(|| Error::invalid("no channels"))?;
        let (f, l) = first.shape();
        let mut data = Array3::zeros((channels.len(), f, l));
        for (c, ch) in channels.iter().enumerate() {
            if ch.shape() != (f, l) || ch.params != first.params {
                return Err(Error::invalid(format!("channel {c} does not match channel 0")));
            }
            data.index_axis_mut(Axis(0), c).assign(&ch.data);
        }
        Ok(Self { data, params: first.params })
    }

    pub fn zeros(params: StftParams, n_channels: usize, n_frames: usize) -> Self {
        Self::from_raw(Array3::zeros((n_channels, params.n_freqs(), n_frames)), params)
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_freqs(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().2
    }

    pub fn channel_view(&self, c: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), c)
    }

    pub fn channel(&self, c: usize) -> Spectrogram {
        Spectrogram::from_raw(self.channel_view(c).to_owned(), self.params)
    }

    pub fn channels(&self) -> Vec<Spectrogram> {
        (0..self.n_channels()).map(|c| self.channel(c)).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { data: self.data.mapv(|z| z * s), params: self.params }
    }

    /// Whether a single-channel spectrogram has the same `F × L` layout.
    pub fn matches(&self, s: &Spectrogram) -> bool {
        (self.n_freqs(), self.n_frames()) == s.shape()
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
}

/// Periodic square-root Hann window of length `n`.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt()).collect()
}

/// STFT with a square-root Hann window, no centering. The final frame is
/// zero-padded when `(len - fft_size)` is not a multiple of the hop.
pub fn stft(signal: &[f64], params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    if signal.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    if signal.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("signal contains non-finite samples"));
    }
    if signal.len() < params.fft_size {
        return Err(Error::invalid(format!(
            "signal length {} shorter than fft_size {}",
            signal.len(),
            params.fft_size
        )));
    }
    let n = params.fft_size;
    let n_frames = params.n_frames(signal.len());
    let window = sqrt_hann(n);
    let fft = plans(n).forward;
    let first_bin = usize::from(!params.keep_dc);
    let mut data = Array2::zeros((params.n_freqs(), n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for l in 0..n_frames {
        let start = l * params.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let x = signal.get(start + i).copied().unwrap_or(0.0);
            *b = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (row, k) in (first_bin..=n / 2).enumerate() {
            data[[row, l]] = buf[k];
        }
    }
    Ok(Spectrogram::from_raw(data, *params))
}

/// Time-domain frame (complex, before taking the real part) for one column.
fn inverse_frame(column: impl Iterator<Item = Complex64>, params: &StftParams, ifft: &dyn Fft<f64>) -> Vec<Complex64> {
    let n = params.fft_size;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let first_bin = usize::from(!params.keep_dc);
    for (k, z) in (first_bin..=n / 2).zip(column) {
        buf[k] = z;
        if k != 0 && k != n / 2 {
            buf[n - k] = z.conj();
        }
    }
    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|z| *z *= scale);
    buf
}

/// Weighted overlap-add synthesis mirroring [`stft`]. A missing DC row is
/// treated as zero.
pub fn istft(spec: &Spectrogram, out_len: usize) -> Result<Vec<f64>> {
    let params = spec.params;
    params.validate()?;
    if out_len == 0 {
        return Err(Error::invalid("output length must be positive"));
    }
    if spec.n_frames() == 0 {
        return Err(Error::invalid("spectrogram has no frames"));
    }
    if spec.n_freqs() != params.n_freqs() {
        return Err(Error::invalid("spectrogram rows do not match its STFT parameters"));
    }
    let n = params.fft_size;
    let full_len = (spec.n_frames() - 1) * params.hop + n;
    if out_len > full_len {
        return Err(Error::invalid(format!("output length {out_len} exceeds {full_len}")));
    }
    if !spec.is_finite() {
        return Err(Error::invalid("spectrogram contains non-finite values"));
    }
    let window = sqrt_hann(n);
    let ifft = plans(n).inverse;
    let mut acc = vec![0.0; full_len];
    let mut wsum = vec![0.0; full_len];
    for l in 0..spec.n_frames() {
        let frame = inverse_frame(spec.data.column(l).iter().copied(), &params, ifft.as_ref());
        let start = l * params.hop;
        for i in 0..n {
            acc[start + i] += frame[i].re * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    Ok(acc
        .iter()
        .zip(&wsum)
        .take(out_len)
        .map(|(&a, &w)| if w > 1e-10 { a / w } else { 0.0 })
        .collect())
}

/// Pads `signal` by [`StftParams::edge_padding`] zeros on both sides and takes
/// the STFT. Pair with [`synthesize`] for a lossless waveform round trip.
pub fn analyze(signal: &[f64], params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    if signal.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    let pad = params.edge_padding();
    let mut padded = vec![0.0; signal.len() + 2 * pad];
    padded[pad..pad + signal.len()].copy_from_slice(signal);
    if padded.len() < params.fft_size {
        padded.resize(params.fft_size, 0.0);
    }
    stft(&padded, params)
}

/// Inverse of [`analyze`] for an original signal of `len` samples.
pub fn synthesize(spec: &Spectrogram, len: usize) -> Result<Vec<f64>> {
    let pad = spec.params.edge_padding();
    let full = istft(spec, pad + len)?;
    Ok(full[pad..].to_vec())
}

/// Per-bin `|x|^0.5 · exp(j∠x)`.
pub fn compress(spec: &Spectrogram) -> Spectrogram {
    spec.map(compress_bin)
}

/// Per-bin `|x|^2 · exp(j∠x) = |x| · x`.
pub fn decompress(spec: &Spectrogram) -> Spectrogram {
    spec.map(decompress_bin)
}

#[inline]
pub fn compress_bin(z: Complex64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        z * (1.0 / r.sqrt())
    }
}

#[inline]
pub fn decompress_bin(z: Complex64) -> Complex64 {
    z * z.norm()
}

/// Vector-Jacobian product of [`decompress`] at `at`, with real and imaginary
/// parts as the independent variables. A gradient `g` is stored as
/// `∂/∂Re + j ∂/∂Im`. Magnitudes below `eps_mag` are clamped to `eps_mag`.
pub fn decompress_vjp(at: &Spectrogram, cotangent: &Spectrogram, eps_mag: f64) -> Result<Spectrogram> {
    if !(eps_mag > 0.0) {
        return Err(Error::invalid("eps_mag must be positive"));
    }
    at.check_same_shape(cotangent, "decompress_vjp")?;
    let mut out = cotangent.data.clone();
    ndarray::Zip::from(&mut out)
        .and(&at.data)
        .for_each(|g, &x| *g = decompress_vjp_bin(x, *g, eps_mag));
    Ok(at.with_data(out))
}

/// `J^T g` for `x ↦ |x| x`: `r g + x · Re(conj(x) g) / r` with `r = max(|x|, eps)`.
#[inline]
pub fn decompress_vjp_bin(x: Complex64, g: Complex64, eps_mag: f64) -> Complex64 {
    let r = x.norm().max(eps_mag);
    let proj = x.re * g.re + x.im * g.im;
    g * r + x * (proj / r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn params() -> StftParams {
        StftParams::default()
    }

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn frame_count_and_shape() {
        let p = params();
        let s = stft(&vec![0.0; 16_000], &p).unwrap();
        assert_eq!(s.n_freqs(), 256);
        assert_eq!(s.n_frames(), (16_000 - 512usize).div_ceil(128) + 1);
        let s = stft(&vec![0.0; 16_000], &p.with_dc()).unwrap();
        assert_eq!(s.n_freqs(), 257);
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = stft(&vec![0.0; 16_000], &params()).unwrap();
        assert!(s.data().iter().all(|z| *z == c(0.0, 0.0)));
        let y = istft(&s, 1000).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let p = params();
        assert!(matches!(stft(&[], &p), Err(Error::InvalidInput(_))));
        let mut x = vec![0.0; 1024];
        x[3] = f64::NAN;
        assert!(matches!(stft(&x, &p), Err(Error::InvalidInput(_))));
        assert!(stft(&[0.0; 100], &p).is_err());
        assert!(stft(&[0.0; 1024], &StftParams::new(500, 128, 16_000)).is_err());
        assert!(stft(&[0.0; 1024], &StftParams::new(512, 0, 16_000)).is_err());
        let s = stft(&[0.0; 1024], &p).unwrap();
        assert!(istft(&s, 0).is_err());
        assert!(istft(&s, 100_000).is_err());
    }

    /// Dense DFT of one windowed frame, independent of rustfft.
    fn dense_dft_bin(frame: &[f64], k: usize) -> Complex64 {
        let n = frame.len();
        frame
            .iter()
            .enumerate()
            .map(|(i, &x)| x * Complex64::from_polar(1.0, -2.0 * PI * (k * i) as f64 / n as f64))
            .sum()
    }

    #[test]
    fn bin_centred_sine_matches_dense_dft_and_concentrates() {
        let p = params();
        let k = 37;
        let f0 = k as f64 * 16_000.0 / 512.0;
        let x: Vec<f64> = (0..16_000).map(|i| (2.0 * PI * f0 * i as f64 / 16_000.0 + 0.3).sin()).collect();
        let s = stft(&x, &p).unwrap();
        let w = sqrt_hann(512);
        for l in [3usize, 40, 100] {
            let frame: Vec<f64> = (0..512).map(|i| x[l * 128 + i] * w[i]).collect();
            let total: f64 = (1..=256).map(|b| dense_dft_bin(&frame, b).norm_sqr()).sum();
            for b in [k - 1, k, k + 1, 100] {
                let want = dense_dft_bin(&frame, b);
                assert!((s.data()[[b - 1, l]] - want).norm() < 1e-9 * total.sqrt());
            }
            let at_k = s.data()[[k - 1, l]].norm_sqr();
            let near_k: f64 = (k - 1..=k + 1).map(|b| s.data()[[b - 1, l]].norm_sqr()).sum();
            // The sqrt-Hann main lobe spans three bins: 8/π² of the energy
            // sits in bin k and 99.06% within k±1.
            assert!((at_k / total - 8.0 / (PI * PI)).abs() < 1e-3, "{}", at_k / total);
            assert!(near_k / total >= 0.99, "{}", near_k / total);
        }
    }

    #[test]
    fn analysis_synthesis_round_trip_on_interior() {
        let p = params().with_dc();
        let x = random_signal(16_000, 1);
        let s = stft(&x, &p).unwrap();
        let y = istft(&s, x.len()).unwrap();
        let lo = p.fft_size - p.hop;
        let hi = x.len() - (p.fft_size - p.hop);
        assert!(rel_l2(&y[lo..hi], &x[lo..hi]) < 1e-6);
    }

    #[test]
    fn padded_round_trip_is_lossless_everywhere() {
        let p = params().with_dc();
        for len in [512usize, 777, 16_000, 16_001] {
            let x = random_signal(len, len as u64);
            let y = synthesize(&analyze(&x, &p).unwrap(), len).unwrap();
            assert!(rel_l2(&y, &x) < 1e-12, "len {len}");
        }
    }

    #[test]
    fn dc_row_round_trip() {
        let p = params().with_dc();
        let x: Vec<f64> = random_signal(4000, 2).iter().map(|v| v + 0.25).collect();
        let s = analyze(&x, &p).unwrap();
        let (dc, rest) = s.split_dc().unwrap();
        assert_eq!(rest.n_freqs(), 256);
        let back = rest.join_dc(&dc).unwrap();
        assert_eq!(back, s);
        let y = synthesize(&back, x.len()).unwrap();
        assert!(rel_l2(&y, &x) < 1e-12);
        // without the DC row the offset is lost
        let y0 = synthesize(&rest, x.len()).unwrap();
        assert!(rel_l2(&y0, &x) > 1e-3);
    }

    #[test]
    fn consistent_spectra_synthesize_to_real_frames() {
        let p = params().with_dc();
        let ifft = plans(p.fft_size).inverse;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut col: Vec<Complex64> = (0..p.n_freqs())
                .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            col[0].im = 0.0;
            col[p.n_freqs() - 1].im = 0.0;
            let frame = inverse_frame(col.into_iter(), &p, ifft.as_ref());
            let re: f64 = frame.iter().map(|z| z.re * z.re).sum::<f64>().sqrt();
            let im: f64 = frame.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
            assert!(im < 1e-9 * re, "{im} vs {re}");
        }
    }

    #[test]
    fn compress_examples() {
        assert_eq!(compress_bin(c(4.0, 0.0)), c(2.0, 0.0));
        assert_eq!(compress_bin(c(0.0, 0.0)), c(0.0, 0.0));
        assert_eq!(decompress_bin(c(2.0, 0.0)), c(4.0, 0.0));
        let s2 = 2f64.sqrt();
        assert!((decompress_bin(c(1.0, 1.0)) - c(s2, s2)).norm() < 1e-15);
        assert_eq!(decompress_bin(c(0.0, 0.0)), c(0.0, 0.0));
    }

    #[test]
    fn vjp_examples() {
        let at = Spectrogram::from_raw(Array2::from_elem((256, 1), c(1.5, 0.0)), params());
        let g = at.map(|_| c(0.7, 0.0));
        let out = decompress_vjp(&at, &g, DEFAULT_EPS_MAG).unwrap();
        assert!((out.data()[[0, 0]] - c(2.0 * 1.5 * 0.7, 0.0)).norm() < 1e-15);
        let zero = decompress_vjp(&at, &at.scaled(0.0), DEFAULT_EPS_MAG).unwrap();
        assert_eq!(zero.norm(), 0.0);
        assert!(decompress_vjp(&at, &g, 0.0).is_err());
        // clamp keeps the origin finite
        let origin = at.scaled(0.0);
        let out = decompress_vjp(&origin, &g, DEFAULT_EPS_MAG).unwrap();
        assert!(out.is_finite());
    }

    /// Jacobian of `x ↦ |x| x` by central differences, as a 2×2 real matrix
    /// `[[∂u/∂a, ∂u/∂b], [∂v/∂a, ∂v/∂b]]`.
    fn fd_jacobian(x: Complex64, h: f64) -> [[f64; 2]; 2] {
        let d_re = (decompress_bin(x + c(h, 0.0)) - decompress_bin(x - c(h, 0.0))) / (2.0 * h);
        let d_im = (decompress_bin(x + c(0.0, h)) - decompress_bin(x - c(0.0, h))) / (2.0 * h);
        [[d_re.re, d_im.re], [d_re.im, d_im.im]]
    }

    #[test]
    fn vjp_matches_finite_differences_on_all_partials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = c(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            if x.norm() < 10.0 * DEFAULT_EPS_MAG {
                continue;
            }
            let j = fd_jacobian(x, 1e-6 * x.norm().max(1e-3));
            // unit cotangents pick out columns of J^T
            let e_re = decompress_vjp_bin(x, c(1.0, 0.0), DEFAULT_EPS_MAG);
            let e_im = decompress_vjp_bin(x, c(0.0, 1.0), DEFAULT_EPS_MAG);
            let analytic = [[e_re.re, e_im.re], [e_re.im, e_im.im]];
            let scale = j.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
            for a in 0..2 {
                for b in 0..2 {
                    // J^T[a][b] = J[b][a]
                    let err = (analytic[a][b] - j[b][a]).abs() / scale;
                    assert!(err < 1e-5, "x={x} a={a} b={b} err={err}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn compress_round_trips(re in -1e3f64..1e3, im in -1e3f64..1e3) {
            let z = c(re, im);
            prop_assume!(z.norm() > 1e-200);
            let a = decompress_bin(compress_bin(z));
            let b = compress_bin(decompress_bin(z));
            prop_assert!((a - z).norm() <= 1e-12 * z.norm());
            prop_assert!((b - z).norm() <= 1e-12 * z.norm());
        }

        #[test]
        fn compress_is_magnitude_monotone(r1 in 0.0f64..1e4, r2 in 0.0f64..1e4, p1 in -3.1f64..3.1, p2 in -3.1f64..3.1) {
            prop_assume!(r1 < r2);
            let a = compress_bin(Complex64::from_polar(r1, p1));
            let b = compress_bin(Complex64::from_polar(r2, p2));
            prop_assert!(a.norm() < b.norm());
        }

        #[test]
        fn stft_round_trip_interior(seed in 0u64..1000, len in 2048usize..6000) {
            let p = params().with_dc();
            let x = random_signal(len, seed);
            let y = istft(&stft(&x, &p).unwrap(), len).unwrap();
            let lo = p.fft_size - p.hop;
            let full = (p.n_frames(len) - 1) * p.hop + p.fft_size;
            let hi = (full - lo).min(len);
            prop_assert!(rel_l2(&y[lo..hi], &x[lo..hi]) < 1e-6);
        }
    }
}
