//! WAV inputs, length reconciliation and denoiser construction.

use std::path::{Path, PathBuf};

use uadps::diffusion::{Denoiser, ExternalDenoiser, GaussianPriorDenoiser, OracleDenoiser, Schedule};
use uadps::spectral::{analyze, compress, Spectrogram, StftParams};
use uadps::wav::{read_wav, Audio};

use crate::{Failure, LengthArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthPolicy {
    Strict,
    Pad,
    Trim,
}

impl From<&LengthArgs> for LengthPolicy {
    fn from(a: &LengthArgs) -> Self {
        match (a.pad, a.trim) {
            (true, _) => Self::Pad,
            (_, true) => Self::Trim,
            _ => Self::Strict,
        }
    }
}

pub fn read_audio(path: &Path) -> Result<Audio, Failure> {
    Ok(read_wav(path)?)
}

pub fn read_mono(path: &Path) -> Result<(u32, Vec<f64>), Failure> {
    let mut audio = read_audio(path)?;
    if audio.n_channels() != 1 {
        return Err(Failure::config(format!("{}: expected a single-channel WAV, found {} channels", path.display(), audio.n_channels())));
    }
    Ok((audio.sample_rate, audio.channels.remove(0)))
}

/// Brings every signal to a common length under `policy`. `signals` pairs each
/// waveform with the file it came from, for error messages.
pub fn fit_lengths(signals: &mut [(&Path, &mut Vec<f64>)], policy: LengthPolicy) -> Result<usize, Failure> {
    let lens: Vec<usize> = signals.iter().map(|(_, s)| s.len()).collect();
    let target = match policy {
        LengthPolicy::Strict => {
            if let Some((path, s)) = signals.iter().find(|(_, s)| s.len() != lens[0]) {
                return Err(Failure::config(format!(
                    "{}: length {} differs from {} ({} samples); pass --pad or --trim",
                    path.display(),
                    s.len(),
                    signals[0].0.display(),
                    lens[0]
                )));
            }
            lens[0]
        }
        LengthPolicy::Pad => lens.iter().copied().max().unwrap_or(0),
        LengthPolicy::Trim => lens.iter().copied().min().unwrap_or(0),
    };
    for (_, s) in signals.iter_mut() {
        s.resize(target, 0.0);
    }
    Ok(target)
}

pub fn check_rates(expected: u32, files: &[(PathBuf, u32)]) -> Result<(), Failure> {
    for (path, rate) in files {
        if *rate != expected {
            return Err(Failure::config(format!("{}: sample rate {rate} Hz differs from the mixture's {expected} Hz", path.display())));
        }
    }
    Ok(())
}

/// Mixture, estimates and optional references at one length and rate.
pub struct Inputs {
    pub sample_rate: u32,
    pub mixture: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
    pub n_samples: usize,
}

pub fn load_inputs(mixture: &Path, estimates: &[PathBuf], references: &[PathBuf], policy: LengthPolicy) -> Result<Inputs, Failure> {
    let mix = read_audio(mixture)?;
    if mix.n_channels() < 2 {
        return Err(Failure::config(format!("{}: mixture needs at least two channels, found {}", mixture.display(), mix.n_channels())));
    }
    if !references.is_empty() && references.len() != estimates.len() {
        return Err(Failure::config(format!("--reference lists {} files but --estimates lists {}", references.len(), estimates.len())));
    }
    let mut rates = Vec::new();
    let mut est = Vec::new();
    for p in estimates {
        let (r, s) = read_mono(p)?;
        rates.push((p.clone(), r));
        est.push(s);
    }
    let mut refs = Vec::new();
    for p in references {
        let (r, s) = read_mono(p)?;
        rates.push((p.clone(), r));
        refs.push(s);
    }
    check_rates(mix.sample_rate, &rates)?;
    let sample_rate = mix.sample_rate;
    let mut mix_channels = mix.channels;
    let n_samples = {
        let mut all: Vec<(&Path, &mut Vec<f64>)> = Vec::new();
        for c in mix_channels.iter_mut() {
            all.push((mixture, c));
        }
        for (p, s) in estimates.iter().zip(est.iter_mut()) {
            all.push((p, s));
        }
        for (p, s) in references.iter().zip(refs.iter_mut()) {
            all.push((p, s));
        }
        fit_lengths(&mut all, policy)?
    };
    Ok(Inputs { sample_rate, mixture: mix_channels, estimates: est, references: refs, n_samples })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    /// Posterior-mean oracle on known clean sources; no files means the
    /// generated scene's own sources.
    Oracle(Vec<PathBuf>),
    Gaussian(f64),
    Extern(String),
}

impl DenoiserSpec {
    pub fn parse(s: &str) -> Result<Self, Failure> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "oracle" if arg.is_empty() => Ok(Self::Oracle(Vec::new())),
            "oracle" => Ok(Self::Oracle(arg.split(',').map(PathBuf::from).collect())),
            "gaussian" => arg
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0)
                .map(Self::Gaussian)
                .ok_or_else(|| Failure::config(format!("--denoiser: gaussian needs a non-negative variance, got `{arg}`"))),
            "extern" if !arg.trim().is_empty() => Ok(Self::Extern(arg.to_string())),
            _ => Err(Failure::config(format!("--denoiser: expected oracle:<wav>, gaussian:<variance> or extern:<command>, got `{s}`"))),
        }
    }
}

/// Compressed clean spectrograms for an oracle read from WAV files.
pub fn oracle_targets(paths: &[PathBuf], n_samples: usize, sample_rate: u32, params: &StftParams) -> Result<Vec<Spectrogram>, Failure> {
    paths
        .iter()
        .map(|p| {
            let (rate, mut s) = read_mono(p)?;
            check_rates(sample_rate, &[(p.clone(), rate)])?;
            s.resize(n_samples, 0.0);
            Ok(compress(&analyze(&s, &params.without_dc())?))
        })
        .collect()
}

/// One denoiser per source. `oracle_clean` holds compressed clean targets when
/// the spec is an oracle.
pub fn build_denoisers(spec: &DenoiserSpec, n_sources: usize, oracle_clean: &[Spectrogram], sched: &Schedule) -> Result<Vec<Box<dyn Denoiser>>, Failure> {
    let mut out: Vec<Box<dyn Denoiser>> = Vec::with_capacity(n_sources);
    match spec {
        DenoiserSpec::Oracle(_) => {
            if oracle_clean.len() != n_sources {
                return Err(Failure::config(format!("--denoiser: oracle needs {n_sources} clean files, got {}", oracle_clean.len())));
            }
            for c in oracle_clean {
                out.push(Box::new(OracleDenoiser::new(c.clone(), sched.clone())));
            }
        }
        DenoiserSpec::Gaussian(v) => {
            for _ in 0..n_sources {
                out.push(Box::new(GaussianPriorDenoiser::scalar(*v, sched.clone())?));
            }
        }
        DenoiserSpec::Extern(cmd) => {
            for _ in 0..n_sources {
                out.push(Box::new(ExternalDenoiser::spawn(cmd)?));
            }
        }
    }
    Ok(out)
}
