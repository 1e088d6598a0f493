//! Synthetic scenes with known ground truth, pseudo-discriminative estimates
//! and SI-SDR evaluation.
//!
//! Transfer functions are drawn directly in the multi-frame STFT filter domain,
//! so the FCP model class is exactly realizable.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use itertools::Itertools;
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::fcp::{apply_atf, AtfFilter};
use crate::linalg;
use crate::rng::{complex_normal, substream, Purpose};
use crate::spectral::{analyze, synthesize, MultiSpectrogram, Spectrogram, StftParams};
use crate::wav::{read_wav, write_wav, Audio, WavFormat};

const SI_SDR_CAP: f64 = 100.0;
/// Largest source count accepted by [`permute_match`].
pub const MAX_PERMUTE_SOURCES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    /// Independent noise of variance `σ²` on every channel.
    SpatiallyWhite(f64),
    /// Fixed `C × C` covariance, row-major.
    FixedScm(Vec<Complex64>),
    /// Inter-channel coherence `sinc(rate · |i − j| · (f + 1) / F)`.
    DiffuseLike(f64),
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::SpatiallyWhite(v) => write!(f, "white:{v}"),
            NoiseKind::DiffuseLike(r) => write!(f, "diffuse:{r}"),
            NoiseKind::FixedScm(p) => {
                write!(f, "fixed-scm:")?;
                let parts = p.iter().map(|z| format!("{},{}", z.re, z.im)).join(",");
                f.write_str(&parts)
            }
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{v}` in noise spec `{s}`")));
        match kind {
            "white" => Ok(NoiseKind::SpatiallyWhite(if arg.is_empty() { 1.0 } else { num(arg)? })),
            "diffuse" => Ok(NoiseKind::DiffuseLike(if arg.is_empty() { 1.0 } else { num(arg)? })),
            "fixed-scm" => {
                let vals = arg.split(',').map(num).collect::<Result<Vec<_>>>()?;
                if vals.len() % 2 != 0 {
                    return Err(Error::invalid("fixed-scm needs (re, im) pairs"));
                }
                Ok(NoiseKind::FixedScm(vals.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()))
            }
            _ => Err(Error::invalid(format!("unknown noise kind `{kind}` (white, diffuse, fixed-scm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_channels: usize,
    pub n_sources: usize,
    /// Length of the true transfer functions in frames.
    pub n_taps: usize,
    pub noise: NoiseKind,
    /// Source-to-noise ratio at channel 0; `+∞` disables noise.
    pub snr_db: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    /// SI-SDR of the fabricated discriminative estimates; `+∞` returns clean.
    pub pseudo_sisdr_db: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_channels: 4,
            n_sources: 1,
            n_taps: 6,
            noise: NoiseKind::SpatiallyWhite(1.0),
            snr_db: 0.0,
            seed: 0,
            duration_s: 1.0,
            sample_rate: 16_000,
            fft_size: 512,
            hop: 128,
            pseudo_sisdr_db: 5.0,
        }
    }
}

impl SceneSpec {
    pub fn params(&self) -> StftParams {
        StftParams::new(self.fft_size, self.hop, self.sample_rate)
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_sources == 0 || self.n_taps == 0 {
            return Err(Error::invalid("scene needs at least one channel, source and tap"));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid("SNR must be a number or +inf"));
        }
        if self.pseudo_sisdr_db.is_nan() || self.pseudo_sisdr_db == f64::NEG_INFINITY {
            return Err(Error::invalid("pseudo SI-SDR must be a number or +inf"));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::invalid("duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        self.params().validate()?;
        if self.n_samples() < self.fft_size {
            return Err(Error::invalid("scene shorter than one STFT frame"));
        }
        match &self.noise {
            NoiseKind::SpatiallyWhite(v) if !(*v > 0.0 && v.is_finite()) => {
                return Err(Error::invalid("white noise variance must be positive"));
            }
            NoiseKind::DiffuseLike(r) if !(*r >= 0.0 && r.is_finite()) => {
                return Err(Error::invalid("diffuse coherence rate must be non-negative"));
            }
            NoiseKind::FixedScm(p) => {
                let c = self.n_channels;
                if p.len() != c * c {
                    return Err(Error::invalid(format!("fixed SCM needs {} entries, got {}", c * c, p.len())));
                }
                for i in 0..c {
                    for j in 0..c {
                        if (p[i * c + j] - p[j * c + i].conj()).norm() > 1e-10 {
                            return Err(Error::invalid("fixed SCM must be Hermitian"));
                        }
                    }
                }
                if linalg::cholesky(p, c).is_none() {
                    return Err(Error::invalid("fixed SCM must be positive definite"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Ground-truth scene in the STFT domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub n_samples: usize,
    pub mixture: MultiSpectrogram,
    pub clean: Vec<Spectrogram>,
    pub true_filters: Vec<AtfFilter>,
    pub noise: MultiSpectrogram,
    /// Amplitude factor applied to the unit-level noise to reach the SNR.
    pub noise_scale: f64,
    pub pseudo: Vec<Spectrogram>,
}

impl Scene {
    /// `Σ_k apply_atf(clean_k, H_k) + noise`.
    pub fn reconstruct(&self) -> Result<MultiSpectrogram> {
        let mut acc = self.noise.data().clone();
        for (x, h) in self.clean.iter().zip(&self.true_filters) {
            acc += apply_atf(x, h)?.data();
        }
        Ok(MultiSpectrogram::from_raw(acc, self.mixture.params()))
    }

    pub fn clean_waveform(&self, k: usize) -> Result<Vec<f64>> {
        synthesize(&self.clean[k], self.n_samples)
    }

    pub fn pseudo_waveform(&self, k: usize) -> Result<Vec<f64>> {
        synthesize(&self.pseudo[k], self.n_samples)
    }

    pub fn mixture_waveforms(&self) -> Result<Vec<Vec<f64>>> {
        self.mixture.channels().iter().map(|c| synthesize(c, self.n_samples)).collect()
    }
}

/// Deterministic per-source seed derived from a scene seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Harmonic AM/FM tone complex with syllable-rate envelope and pauses,
/// normalized to an RMS of 0.1.
pub fn speech_like(n_samples: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    use std::f64::consts::TAU;
    let sr = f64::from(sample_rate);
    let f0 = rng.random_range(90.0..260.0);
    let vib_rate = rng.random_range(3.0..7.0);
    let vib_depth = rng.random_range(0.02..0.08);
    let vib_phase = rng.random_range(0.0..TAU);
    let syl_rate = rng.random_range(3.0..6.0);
    let syl_phase = rng.random_range(0.0..TAU);
    let f1 = rng.random_range(450.0..850.0);
    let f2 = rng.random_range(1100.0..2300.0);

    // voiced/paused segments with 20 ms raised-cosine edges
    let mut gate = vec![0.0; n_samples];
    let ramp = (0.02 * sr) as usize;
    let mut start = 0;
    while start < n_samples {
        let len = (rng.random_range(0.15..0.5) * sr) as usize;
        let end = (start + len).min(n_samples);
        if rng.random_bool(0.75) || start == 0 {
            for (i, g) in gate[start..end].iter_mut().enumerate() {
                let edge = i.min(end - start - 1 - i);
                *g = if edge >= ramp { 1.0 } else { 0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos() };
            }
        }
        start = end;
    }

    let n_harm = ((0.45 * sr) / (f0 * (1.0 + vib_depth))).floor() as usize;
    let weights: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let f = h as f64 * f0;
            (0.2 + (-((f - f1) / 180.0).powi(2)).exp() + 0.7 * (-((f - f2) / 260.0).powi(2)).exp()) / h as f64
        })
        .collect();
    let mut phase = 0.0;
    let mut out = vec![0.0; n_samples];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let inst = f0 * (1.0 + vib_depth * (TAU * vib_rate * t + vib_phase).sin());
        phase += TAU * inst / sr;
        let env = (0.5 + 0.5 * (TAU * syl_rate * t + syl_phase).sin()).powf(0.7) * gate[i];
        let tone: f64 = weights.iter().enumerate().map(|(h, w)| w * ((h + 1) as f64 * phase).sin()).sum();
        let breath: f64 = rng.random_range(-1.0..1.0) * 0.02;
        *o = env * (tone + breath);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n_samples as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    out
}

/// Multi-frame filters: unit first tap on channel 0, unit-magnitude random
/// phase first taps elsewhere, later taps complex normal with energy halving
/// per frame.
pub fn random_atf(n_channels: usize, n_taps: usize, n_freqs: usize, rng: &mut impl Rng) -> AtfFilter {
    let mut taps = Array3::zeros((n_channels, n_taps, n_freqs));
    for c in 0..n_channels {
        for f in 0..n_freqs {
            taps[[c, 0, f]] = if c == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
            };
        }
    }
    let later = complex_normal(rng, n_channels * n_taps.saturating_sub(1), n_freqs);
    for c in 0..n_channels {
        for j in 1..n_taps {
            let std = 0.5f64.powf(j as f64 / 2.0) * 0.5 * std::f64::consts::FRAC_1_SQRT_2;
            for f in 0..n_freqs {
                taps[[c, j, f]] = later[[c * (n_taps - 1) + j - 1, f]] * std;
            }
        }
    }
    AtfFilter::new(taps, 0).expect("finite taps")
}

/// Unit-level noise (before SNR scaling) of the requested spatial structure,
/// `C × F × L`.
fn spatial_noise(kind: &NoiseKind, n_ch: usize, n_f: usize, n_l: usize, rng: &mut ChaCha20Rng) -> Array3<Complex64> {
    // CN(0, I): unit power per channel and bin
    let white = complex_normal(rng, n_ch * n_f, n_l).mapv(|z| z * std::f64::consts::FRAC_1_SQRT_2);
    let white = white.into_shape_with_order((n_ch, n_f, n_l)).expect("shape");
    let color = |w: &Array3<Complex64>, chol: &dyn Fn(usize) -> Vec<Complex64>| {
        let mut out = Array3::zeros(w.dim());
        for f in 0..n_f {
            let l_mat = chol(f);
            for l in 0..n_l {
                for i in 0..n_ch {
                    out[[i, f, l]] = (0..=i).map(|j| l_mat[i * n_ch + j] * w[[j, f, l]]).sum();
                }
            }
        }
        out
    };
    match kind {
        NoiseKind::SpatiallyWhite(v) => white.mapv(|z| z * v.sqrt()),
        NoiseKind::FixedScm(p) => {
            let l_mat = lower_factor(p, n_ch);
            color(&white, &|_| l_mat.clone())
        }
        NoiseKind::DiffuseLike(rate) => color(&white, &|f| {
            let mut g = vec![Complex64::new(0.0, 0.0); n_ch * n_ch];
            for i in 0..n_ch {
                for j in 0..n_ch {
                    let x = rate * i.abs_diff(j) as f64 * (f + 1) as f64 / n_f as f64;
                    let sinc = if x == 0.0 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
                    g[i * n_ch + j] = Complex64::new(sinc + if i == j { 1e-6 } else { 0.0 }, 0.0);
                }
            }
            lower_factor(&g, n_ch)
        }),
    }
}

fn lower_factor(p: &[Complex64], n: usize) -> Vec<Complex64> {
    let chol = linalg::cholesky(p, n).expect("validated positive definite");
    let l = chol.l();
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = l[(i, j)];
        }
    }
    out
}

pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let params = spec.params();
    let n_samples = spec.n_samples();
    let (n_ch, n_k) = (spec.n_channels, spec.n_sources);

    let mut clean = Vec::with_capacity(n_k);
    let mut filters = Vec::with_capacity(n_k);
    for k in 0..n_k {
        let mut rng = substream(spec.seed, Purpose::Scene, k, 0);
        let wave = speech_like(n_samples, spec.sample_rate, &mut rng);
        clean.push(analyze(&wave, &params)?);
        let mut rng = substream(spec.seed, Purpose::Scene, k, 1);
        filters.push(random_atf(n_ch, spec.n_taps, params.n_freqs(), &mut rng));
    }
    let (n_f, n_l) = clean[0].shape();
    let mut reverb = Array3::<Complex64>::zeros((n_ch, n_f, n_l));
    for (x, h) in clean.iter().zip(&filters) {
        reverb += apply_atf(x, h)?.data();
    }

    let (noise, noise_scale) = if spec.snr_db == f64::INFINITY {
        (Array3::zeros((n_ch, n_f, n_l)), 0.0)
    } else {
        let mut rng = substream(spec.seed, Purpose::Scene, 0xff_ffff, 2);
        let raw = spatial_noise(&spec.noise, n_ch, n_f, n_l, &mut rng);
        let p_sig: f64 = reverb.index_axis(Axis(0), 0).iter().map(|z| z.norm_sqr()).sum();
        let p_noise: f64 = raw.index_axis(Axis(0), 0).iter().map(|z| z.norm_sqr()).sum();
        let scale = (p_sig / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        (raw.mapv(|z| z * scale), scale)
    };
    let mixture = MultiSpectrogram::from_raw(&reverb + &noise, params);
    let noise = MultiSpectrogram::from_raw(noise, params);

    let mut pseudo = Vec::with_capacity(n_k);
    for (k, x) in clean.iter().enumerate() {
        let leak = mixture.channel(0).with_data(mixture.channel_view(0).to_owned() - x.data());
        pseudo.push(degrade(x, n_samples, spec.pseudo_sisdr_db, derive_seed(spec.seed, k as u64), Some(&leak))?);
    }
    Ok(Scene { spec: spec.clone(), n_samples, mixture, clean, true_filters: filters, noise, noise_scale, pseudo })
}

/// `clean` plus a perturbation orthogonal to it in the time domain (over the
/// first `n_samples` synthesized samples), scaled so that the SI-SDR of the
/// result against `clean` equals `target_db`. The perturbation is random
/// noise whose magnitude follows `clean` and, when given, `leakage`.
pub fn degrade(clean: &Spectrogram, n_samples: usize, target_db: f64, seed: u64, leakage: Option<&Spectrogram>) -> Result<Spectrogram> {
    if target_db.is_nan() || target_db == f64::NEG_INFINITY {
        return Err(Error::invalid("target SI-SDR must be a number or +inf"));
    }
    if target_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    let c_t = synthesize(clean, n_samples)?;
    let c_energy: f64 = c_t.iter().map(|v| v * v).sum();
    if c_energy == 0.0 {
        return Err(Error::invalid("cannot degrade a silent signal"));
    }
    // magnitude envelope from the clean signal and the leakage, random phase
    let mut env = clean.data().mapv(|c| c.norm() / clean.norm());
    if let Some(leak) = leakage {
        clean.check_same_shape(leak, "leakage")?;
        let ln = leak.norm();
        if ln > 0.0 {
            ndarray::Zip::from(&mut env).and(leak.data()).for_each(|v, z| *v += z.norm() / ln);
        }
    }
    let floor = 1e-3 * env.iter().sum::<f64>() / env.len() as f64;
    let mut rng = substream(seed, Purpose::Degrade, 0, 0);
    let mut e = complex_normal(&mut rng, clean.n_freqs(), clean.n_frames());
    ndarray::Zip::from(&mut e).and(&env).for_each(|w, v| *w *= v + floor);
    let mut e = clean.with_data(e);
    let e_t = synthesize(&e, n_samples)?;
    let beta = e_t.iter().zip(&c_t).map(|(a, b)| a * b).sum::<f64>() / c_energy;
    e.add_scaled(-beta, clean);
    let e_t = synthesize(&e, n_samples)?;
    let e_energy: f64 = e_t.iter().map(|v| v * v).sum();
    if e_energy == 0.0 {
        return Err(Error::Numerical("perturbation vanished after orthogonalization".into()));
    }
    let s = (c_energy * 10f64.powf(-target_db / 10.0) / e_energy).sqrt();
    let mut out = clean.clone();
    out.add_scaled(s, &e);
    Ok(out)
}

/// Scale-invariant SDR in dB, clamped to ±100 dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "SI-SDR needs equal non-empty lengths, got {} and {}",
            estimate.len(),
            reference.len()
        )));
    }
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::invalid("SI-SDR reference is all zeros"));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let target: f64 = alpha * alpha * rr;
    let err: f64 = estimate.iter().zip(reference).map(|(e, r)| (e - alpha * r).powi(2)).sum();
    if err == 0.0 {
        return Ok(SI_SDR_CAP);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP);
    }
    Ok((10.0 * (target / err).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `estimates[perm[i]]` is matched to `references[i]`.
    pub perm: Vec<usize>,
    /// SI-SDR of each matched pair, in reference order.
    pub si_sdr: Vec<f64>,
    pub mean: f64,
}

/// Exhaustive search for the assignment maximizing mean SI-SDR.
pub fn permute_match<E: AsRef<[f64]>, R: AsRef<[f64]>>(estimates: &[E], references: &[R]) -> Result<Matching> {
    let k = references.len();
    if k == 0 || estimates.len() != k {
        return Err(Error::invalid(format!("need equal non-zero counts, got {} estimates and {k} references", estimates.len())));
    }
    if k > MAX_PERMUTE_SOURCES {
        return Err(Error::invalid(format!("exhaustive matching limited to {MAX_PERMUTE_SOURCES} sources")));
    }
    let mut table = vec![0.0; k * k];
    for (i, r) in references.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            table[i * k + j] = si_sdr(e.as_ref(), r.as_ref())?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| table[i * k + j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (total, perm) = best.expect("at least one permutation");
    let si_sdr = perm.iter().enumerate().map(|(i, &j)| table[i * k + j]).collect();
    Ok(Matching { perm, si_sdr, mean: total / k as f64 })
}

/// Scene as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub spec: SceneSpec,
    pub n_samples: usize,
    pub mixture: Audio,
    pub clean: Vec<Vec<f64>>,
    pub pseudo: Vec<Vec<f64>>,
}

fn manifest_text(spec: &SceneSpec, n_samples: usize) -> String {
    let mut lines = vec![
        format!("seed={}", spec.seed),
        format!("channels={}", spec.n_channels),
        format!("sources={}", spec.n_sources),
        format!("taps={}", spec.n_taps),
        format!("noise={}", spec.noise),
        format!("snr_db={}", spec.snr_db),
        format!("duration_s={}", spec.duration_s),
        format!("sample_rate={}", spec.sample_rate),
        format!("fft_size={}", spec.fft_size),
        format!("hop={}", spec.hop),
        format!("pseudo_sisdr_db={}", spec.pseudo_sisdr_db),
        format!("samples={n_samples}"),
        "mixture=mixture.wav".to_string(),
    ];
    for k in 0..spec.n_sources {
        lines.push(format!("clean_{k}=clean_{k}.wav"));
        lines.push(format!("pseudo_{k}=pseudo_{k}.wav"));
    }
    lines.join("\n") + "\n"
}

/// Writes `mixture.wav`, `clean_k.wav`, `pseudo_k.wav` (32-bit float) and
/// `manifest.txt` into `dir`.
pub fn dump_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sr = scene.spec.sample_rate;
    write_wav(dir.join("mixture.wav"), &Audio::new(sr, scene.mixture_waveforms()?)?, WavFormat::Float32)?;
    for k in 0..scene.clean.len() {
        write_wav(dir.join(format!("clean_{k}.wav")), &Audio::mono(sr, scene.clean_waveform(k)?), WavFormat::Float32)?;
        write_wav(dir.join(format!("pseudo_{k}.wav")), &Audio::mono(sr, scene.pseudo_waveform(k)?), WavFormat::Float32)?;
    }
    fs::write(dir.join("manifest.txt"), manifest_text(&scene.spec, scene.n_samples))?;
    Ok(())
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::invalid(format!("expected key=value, got `{l}`")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.join("manifest.txt").display()))))?;
    let kv = parse_key_values(&text)?;
    let get = |key: &str| {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::invalid(format!("manifest lacks `{key}`")))
    };
    fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::invalid(format!("manifest: bad value `{v}` for `{key}`")))
    }
    let spec = SceneSpec {
        n_channels: parse("channels", get("channels")?)?,
        n_sources: parse("sources", get("sources")?)?,
        n_taps: parse("taps", get("taps")?)?,
        noise: get("noise")?.parse()?,
        snr_db: parse("snr_db", get("snr_db")?)?,
        seed: parse("seed", get("seed")?)?,
        duration_s: parse("duration_s", get("duration_s")?)?,
        sample_rate: parse("sample_rate", get("sample_rate")?)?,
        fft_size: parse("fft_size", get("fft_size")?)?,
        hop: parse("hop", get("hop")?)?,
        pseudo_sisdr_db: parse("pseudo_sisdr_db", get("pseudo_sisdr_db")?)?,
    };
    let n_samples = parse("samples", get("samples")?)?;
    let mixture = read_wav(dir.join(get("mixture")?))?;
    let mut clean = Vec::new();
    let mut pseudo = Vec::new();
    for k in 0..spec.n_sources {
        clean.push(read_wav(dir.join(get(&format!("clean_{k}"))?))?.channels.remove(0));
        pseudo.push(read_wav(dir.join(get(&format!("pseudo_{k}"))?))?.channels.remove(0));
    }
    Ok(LoadedScene { spec, n_samples, mixture, clean, pseudo })
}

/// Mean per-bin power of every channel of a multichannel array.
pub fn channel_powers(m: &MultiSpectrogram) -> Vec<f64> {
    let bins = (m.n_freqs() * m.n_frames()) as f64;
    m.data().outer_iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>() / bins).collect()
}

/// Sample covariance over all bins, `C × C` row-major.
pub fn sample_covariance(m: &MultiSpectrogram) -> Array2<Complex64> {
    let c = m.n_channels();
    let mut out = Array2::zeros((c, c));
    let n = (m.n_freqs() * m.n_frames()) as f64;
    for f in 0..m.n_freqs() {
        for l in 0..m.n_frames() {
            for i in 0..c {
                for j in 0..c {
                    out[[i, j]] += m.data()[[i, f, l]] * m.data()[[j, f, l]].conj() / n;
                }
            }
        }
    }
    out
}
