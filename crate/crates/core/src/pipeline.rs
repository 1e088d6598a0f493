//! End-to-end refinement: SCM preparation from the discriminative estimates,
//! re-noising to `T′`, the guided reverse chain, alignment and interpolation.

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::diffusion::{forward_to_step, prior_step_with_noise, reverse_steps, Denoiser, Schedule};
use crate::error::{Error, Result};
use crate::fcp::{apply_atf, fcp_estimate_lenient, AtfFilter, FcpConfig};
use crate::guidance::{apply_guidance, likelihood_grad_with, GradMode, GuidanceConfig, GuidanceReport, Likelihood};
use crate::rng::{complex_normal, substream, Purpose};
use crate::scm::{estimate_noise, scm_ema, scm_inverse, ScmField, DEFAULT_ETA};
use crate::spectral::{analyze, compress, decompress, synthesize, MultiSpectrogram, Spectrogram, StftParams, DEFAULT_EPS_MAG};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Diffusion step the chain starts from; 0 skips sampling.
    pub t_start: usize,
    pub xi: f64,
    /// Weight of the discriminative estimate in the final interpolation.
    pub alpha: f64,
    pub eta: f64,
    pub fcp: FcpConfig,
    pub align_taps: usize,
    pub seed: u64,
    pub grad_mode: GradMode,
    /// Experimental step skipping; 1 visits every step.
    pub stride: usize,
    pub differentiate_through_fcp: bool,
    pub eps_mag: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            t_start: 300,
            xi: 0.4,
            alpha: 0.5,
            eta: DEFAULT_ETA,
            fcp: FcpConfig::default(),
            align_taps: 1,
            seed: 0,
            grad_mode: GradMode::Detached,
            stride: 1,
            differentiate_through_fcp: false,
            eps_mag: DEFAULT_EPS_MAG,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        if self.t_start > sched.n_steps() {
            return Err(Error::invalid(format!("t_start {} exceeds the {} schedule steps", self.t_start, sched.n_steps())));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        if self.align_taps == 0 {
            return Err(Error::invalid("align_taps must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        self.fcp.validate()?;
        self.guidance().validate()
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            xi: self.xi,
            grad_mode: self.grad_mode,
            eps_mag: self.eps_mag,
            differentiate_through_fcp: self.differentiate_through_fcp,
        }
    }

    fn align_fcp(&self) -> FcpConfig {
        FcpConfig { n_taps: self.align_taps, lookahead: 0, ..self.fcp }
    }
}

/// Noise covariance estimated once from the discriminative estimates.
#[derive(Debug, Clone)]
pub struct ScmPreparation {
    pub scm: ScmField,
    pub inverse: ScmField,
    pub filters: Vec<AtfFilter>,
    pub fcp_failures: usize,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub refined: Vec<Spectrogram>,
    pub aligned: Vec<Spectrogram>,
    pub dps_raw: Vec<Spectrogram>,
    pub scm: ScmPreparation,
    /// One entry per guided step; empty when `xi = 0`.
    pub reports: Vec<GuidanceReport>,
    /// Likelihood quadratic form at the sampled output.
    pub final_residual: f64,
}

fn check_inputs(mixture: &MultiSpectrogram, sources: &[Spectrogram]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::invalid("at least one source estimate is required"));
    }
    for (k, s) in sources.iter().enumerate() {
        if !mixture.matches(s) {
            return Err(Error::invalid(format!(
                "estimate {k} has shape {:?}, mixture has {:?}",
                s.shape(),
                (mixture.n_freqs(), mixture.n_frames())
            )));
        }
    }
    Ok(())
}

pub fn prepare_scm(mixture: &MultiSpectrogram, discriminative: &[Spectrogram], fcp: &FcpConfig, eta: f64) -> Result<ScmPreparation> {
    check_inputs(mixture, discriminative)?;
    let mut filters = Vec::with_capacity(discriminative.len());
    let mut fcp_failures = 0;
    for x in discriminative {
        let sol = fcp_estimate_lenient(x, mixture, fcp)?;
        fcp_failures += sol.failed_freqs.len();
        filters.push(sol.filter);
    }
    let noise = estimate_noise(mixture, discriminative, &filters)?;
    let scm = scm_ema(&noise, eta)?;
    let inverse = scm_inverse(&scm)?;
    Ok(ScmPreparation { scm, inverse, filters, fcp_failures })
}

/// Scales each `dps_out[k]` onto `discriminative[k]` with an FCP filter whose
/// weights come from the discriminative estimate.
pub fn align_sources(dps_out: &[Spectrogram], discriminative: &[Spectrogram], fcp: &FcpConfig) -> Result<Vec<Spectrogram>> {
    if dps_out.len() != discriminative.len() {
        return Err(Error::invalid("one sampled output per discriminative estimate required"));
    }
    dps_out
        .iter()
        .zip(discriminative)
        .map(|(x, target)| {
            x.check_same_shape(target, "alignment target")?;
            let target = MultiSpectrogram::from_channels(std::slice::from_ref(target))?;
            let sol = fcp_estimate_lenient(x, &target, fcp)?;
            if !sol.failed_freqs.is_empty() {
                log::warn!("alignment: {} frequencies fell back to zero taps", sol.failed_freqs.len());
            }
            Ok(apply_atf(x, &sol.filter)?.channel(0))
        })
        .collect()
}

/// `α · a + (1 − α) · b` per bin.
pub fn interpolate(a: &Spectrogram, b: &Spectrogram, alpha: f64) -> Result<Spectrogram> {
    a.check_same_shape(b, "interpolation operand")?;
    let mut out = a.data().clone();
    Zip::from(&mut out).and(b.data()).for_each(|o, &y| *o = *o * alpha + y * (1.0 - alpha));
    Ok(a.with_data(out))
}

pub fn refine<D: Denoiser>(
    mixture: &MultiSpectrogram,
    discriminative: &[Spectrogram],
    denoisers: &mut [D],
    cfg: &RefineConfig,
    sched: &Schedule,
) -> Result<RefineResult> {
    cfg.validate(sched)?;
    check_inputs(mixture, discriminative)?;
    if denoisers.len() != discriminative.len() {
        return Err(Error::invalid(format!("{} estimates but {} denoisers", discriminative.len(), denoisers.len())));
    }
    let prep = prepare_scm(mixture, discriminative, &cfg.fcp, cfg.eta)?;
    if prep.fcp_failures > 0 {
        log::warn!("SCM preparation: {} frequencies fell back to zero taps", prep.fcp_failures);
    }
    refine_with_scm(mixture, discriminative, denoisers, cfg, sched, prep)
}

/// [`refine`] with an already prepared noise SCM in place of the one estimated
/// from the discriminative inputs.
pub fn refine_with_scm<D: Denoiser>(
    mixture: &MultiSpectrogram,
    discriminative: &[Spectrogram],
    denoisers: &mut [D],
    cfg: &RefineConfig,
    sched: &Schedule,
    prep: ScmPreparation,
) -> Result<RefineResult> {
    cfg.validate(sched)?;
    check_inputs(mixture, discriminative)?;
    if denoisers.len() != discriminative.len() {
        return Err(Error::invalid(format!("{} estimates but {} denoisers", discriminative.len(), denoisers.len())));
    }
    let k_src = discriminative.len();
    let model = Likelihood::new(mixture, &prep.inverse, cfg.fcp)?;
    let gcfg = cfg.guidance();

    let mut state: Vec<Spectrogram> = Vec::with_capacity(k_src);
    for (k, x) in discriminative.iter().enumerate() {
        let xbar = compress(x);
        state.push(if cfg.t_start == 0 {
            xbar
        } else {
            forward_to_step(&xbar, cfg.t_start, sched, &mut substream(cfg.seed, Purpose::ForwardInit, k, 0))?
        });
    }

    let mut reports = Vec::new();
    for (t, t_prev) in reverse_steps(cfg.t_start, cfg.stride) {
        let step = sched.transition(t, t_prev)?;
        let predictions = state
            .iter()
            .zip(denoisers.iter_mut())
            .map(|(x, d)| d.predict(x, t, sched))
            .collect::<Result<Vec<_>>>()?;
        let mut next = Vec::with_capacity(k_src);
        for (k, (x, p)) in state.iter().zip(&predictions).enumerate() {
            let (n_f, n_l) = x.shape();
            let z = if step.sigma == 0.0 {
                Array2::<Complex64>::zeros((n_f, n_l))
            } else {
                complex_normal(&mut substream(cfg.seed, Purpose::PriorStep, k, t), n_f, n_l)
            };
            next.push(prior_step_with_noise(x, &p.noise, &step, &x.with_data(z))?);
        }
        if cfg.xi > 0.0 {
            let (grads, report) = likelihood_grad_with(&state, &predictions, denoisers, &model, sched, t, &gcfg)?;
            if report.fcp_solve_failures > 0 {
                log::debug!("step {t}: {} FCP frequencies fell back to zero taps", report.fcp_solve_failures);
            }
            next = apply_guidance(&next, &grads, &step, cfg.xi)?;
            reports.push(report);
        }
        state = next;
    }

    let final_residual = model.evaluate(&state, None)?.value();
    let dps_raw: Vec<Spectrogram> = state.iter().map(decompress).collect();
    let aligned = align_sources(&dps_raw, discriminative, &cfg.align_fcp())?;
    let refined = discriminative
        .iter()
        .zip(&aligned)
        .map(|(x, a)| interpolate(x, a, cfg.alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(RefineResult { refined, aligned, dps_raw, scm: prep, reports, final_residual })
}

/// STFT-domain inputs built from waveforms, with DC rows held aside.
#[derive(Debug, Clone)]
pub struct AnalyzedInputs {
    pub mixture: MultiSpectrogram,
    pub estimates: Vec<Spectrogram>,
    pub estimate_dc: Vec<Vec<Complex64>>,
    pub n_samples: usize,
}

/// Analyzes equal-length waveforms with `params` (DC removed from the refined
/// representation, kept aside for the estimates).
pub fn analyze_inputs(mixture: &[Vec<f64>], estimates: &[Vec<f64>], params: &StftParams) -> Result<AnalyzedInputs> {
    let n_samples = mixture.first().map_or(0, Vec::len);
    if mixture.iter().chain(estimates).any(|w| w.len() != n_samples) {
        return Err(Error::invalid("mixture channels and estimates must share one length"));
    }
    let no_dc = params.without_dc();
    let channels = mixture.iter().map(|w| analyze(w, &no_dc)).collect::<Result<Vec<_>>>()?;
    let mixture = MultiSpectrogram::from_channels(&channels)?;
    let mut out = Vec::with_capacity(estimates.len());
    let mut dcs = Vec::with_capacity(estimates.len());
    for w in estimates {
        let (dc, spec) = analyze(w, &params.with_dc())?.split_dc()?;
        out.push(spec);
        dcs.push(dc);
    }
    Ok(AnalyzedInputs { mixture, estimates: out, estimate_dc: dcs, n_samples })
}

/// Rejoins the held-aside DC rows and synthesizes `n_samples` per source.
pub fn synthesize_outputs(specs: &[Spectrogram], dc: &[Vec<Complex64>], n_samples: usize) -> Result<Vec<Vec<f64>>> {
    if specs.len() != dc.len() {
        return Err(Error::invalid("one DC row per output required"));
    }
    specs.iter().zip(dc).map(|(s, d)| synthesize(&s.join_dc(d)?, n_samples)).collect()
}
