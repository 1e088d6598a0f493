//! Likelihood score and the guided update.
//!
//! For compressed-domain states `x̄_t^k` the forward chain is
//!
//! ```text
//! x̄_t ─denoise→ x̄̂0 ─decompress→ x̂0 ─FCP→ Ĥ ─apply, sum→ N̂ = Y − Σ_k Ĥ^k x̂0^k
//!     f = Σ_{l,f} N̂^H Φ⁻¹ N̂
//! ```
//!
//! and the score is `G_k = −½ ∇_{x̄_t^k} f`. Gradients of real scalars with
//! respect to complex arrays are stored as `∂/∂Re + j ∂/∂Im` throughout, so the
//! gradient of `f` with respect to `N̂` is `2 Φ⁻¹ N̂`.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::diffusion::{Denoiser, Prediction, Schedule, Transition};
use crate::error::{Error, Result};
use crate::fcp::{apply_atf, apply_atf_adjoint, fcp_estimate_weighted, fcp_vjp, fcp_weights, AtfFilter, FcpConfig, FcpSolution};
use crate::rng::{substream, Purpose};
use crate::scm::{apply_inverse, quadratic_form_per_freq, ScmField};
use crate::spectral::{decompress, decompress_vjp, MultiSpectrogram, Spectrogram, DEFAULT_EPS_MAG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Noise estimate and filters held constant within a step.
    #[default]
    Detached,
    /// Differentiate through the denoiser via its vector-Jacobian product.
    FullVjp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub xi: f64,
    pub grad_mode: GradMode,
    pub eps_mag: f64,
    pub differentiate_through_fcp: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { xi: 0.4, grad_mode: GradMode::Detached, eps_mag: DEFAULT_EPS_MAG, differentiate_through_fcp: false }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.xi.is_finite() || self.xi < 0.0 {
            return Err(Error::invalid(format!("xi must be finite and non-negative, got {}", self.xi)));
        }
        if !(self.eps_mag > 0.0) {
            return Err(Error::invalid("eps_mag must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceReport {
    pub t: usize,
    pub quadratic_value: f64,
    pub grad_norms: Vec<f64>,
    pub fcp_solve_failures: usize,
}

/// Observation model shared by every step: mixture, inverse noise SCM and
/// the FCP weights derived from the mixture.
#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    pub mixture: &'a MultiSpectrogram,
    pub inv_scm: &'a ScmField,
    pub fcp: FcpConfig,
    lambda: Array2<f64>,
}

/// Forward chain evaluated from compressed clean estimates.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Compressed clean estimates `x̄̂0`.
    pub clean_compressed: Vec<Spectrogram>,
    /// Linear-domain clean estimates `x̂0`.
    pub clean: Vec<Spectrogram>,
    pub fcp: Vec<FcpSolution>,
    pub noise: MultiSpectrogram,
    pub per_freq: Vec<f64>,
}

impl ChainState {
    pub fn value(&self) -> f64 {
        self.per_freq.iter().sum()
    }

    pub fn filters(&self) -> Vec<AtfFilter> {
        self.fcp.iter().map(|s| s.filter.clone()).collect()
    }

    pub fn solve_failures(&self) -> usize {
        self.fcp.iter().map(|s| s.failed_freqs.len()).sum()
    }
}

impl<'a> Likelihood<'a> {
    pub fn new(mixture: &'a MultiSpectrogram, inv_scm: &'a ScmField, fcp: FcpConfig) -> Result<Self> {
        fcp.validate()?;
        let lambda = fcp_weights(mixture, fcp.gamma)?;
        if lambda.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::DegenerateWeights);
        }
        if (inv_scm.n_frames(), inv_scm.n_freqs(), inv_scm.n_channels()) != (mixture.n_frames(), mixture.n_freqs(), mixture.n_channels()) {
            return Err(Error::invalid("inverse SCM field does not match the mixture"));
        }
        Ok(Self { mixture, inv_scm, fcp, lambda })
    }

    pub fn lambda(&self) -> &Array2<f64> {
        &self.lambda
    }

    /// Runs the chain from compressed clean estimates. With `frozen` filters
    /// the FCP solve is skipped and the given filters are used instead.
    pub fn evaluate(&self, clean_compressed: &[Spectrogram], frozen: Option<&[FcpSolution]>) -> Result<ChainState> {
        if clean_compressed.is_empty() {
            return Err(Error::invalid("need at least one source"));
        }
        let mut noise = self.mixture.data().clone();
        let mut clean = Vec::with_capacity(clean_compressed.len());
        let mut solutions = Vec::with_capacity(clean_compressed.len());
        for (k, xc) in clean_compressed.iter().enumerate() {
            if !self.mixture.matches(xc) {
                return Err(Error::invalid(format!("source {k} does not match the mixture")));
            }
            let x = decompress(xc);
            let sol = match frozen {
                Some(f) => f.get(k).cloned().ok_or_else(|| Error::invalid("missing frozen filter"))?,
                None => fcp_estimate_weighted(&x, self.mixture, &self.lambda, &self.fcp)?,
            };
            noise -= apply_atf(&x, &sol.filter)?.data();
            clean.push(x);
            solutions.push(sol);
        }
        let noise = MultiSpectrogram::from_raw(noise, self.mixture.params());
        let per_freq = quadratic_form_per_freq(&noise, self.inv_scm)?;
        Ok(ChainState { clean_compressed: clean_compressed.to_vec(), clean, fcp: solutions, noise, per_freq })
    }

    /// `−½ ∇ f` with respect to each compressed clean estimate.
    pub fn clean_score(&self, state: &ChainState, differentiate_through_fcp: bool, eps_mag: f64) -> Result<Vec<Spectrogram>> {
        let weighted = apply_inverse(&state.noise, self.inv_scm)?;
        let mut out = Vec::with_capacity(state.clean.len());
        for (k, x) in state.clean.iter().enumerate() {
            let sol = &state.fcp[k];
            let mut g = apply_atf_adjoint(&weighted, &sol.filter)?;
            if differentiate_through_fcp {
                let g_taps = tap_score(x, &weighted, &sol.filter);
                let via_fcp = fcp_vjp(x, self.mixture, &self.lambda, &self.fcp, sol, &g_taps)?;
                g.add_scaled(1.0, &via_fcp);
            }
            out.push(decompress_vjp(&state.clean_compressed[k], &g, eps_mag)?);
        }
        Ok(out)
    }
}

/// `−½ ∂f/∂h` for `f = Σ N̂^H Φ⁻¹ N̂`, given `W = Φ⁻¹ N̂`:
/// `Σ_l W_c(l, f) · conj(x(l + d − j, f))`.
fn tap_score(x: &Spectrogram, weighted: &MultiSpectrogram, filter: &AtfFilter) -> Array3<Complex64> {
    let (n_ch, n, n_f) = filter.taps().dim();
    let n_l = x.n_frames();
    let d = filter.lookahead();
    let mut out = Array3::zeros((n_ch, n, n_f));
    for c in 0..n_ch {
        let w = weighted.channel_view(c);
        for f in 0..n_f {
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..n_l {
                    if let Some(m) = (l + d).checked_sub(j).filter(|&m| m < n_l) {
                        acc += w[[f, l]] * x.data()[[f, m]].conj();
                    }
                }
                out[[c, j, f]] = acc;
            }
        }
    }
    out
}

/// Gradient norms and dimensions sanity for a batch of per-source arrays.
fn check_sources(xbar_t: &[Spectrogram], n_denoisers: usize) -> Result<()> {
    if xbar_t.is_empty() {
        return Err(Error::invalid("need at least one source"));
    }
    if xbar_t.len() != n_denoisers {
        return Err(Error::invalid(format!("{} sources but {} denoisers", xbar_t.len(), n_denoisers)));
    }
    Ok(())
}

/// Likelihood score from predictions already computed at `xbar_t`.
pub fn likelihood_grad_with<D: Denoiser>(
    xbar_t: &[Spectrogram],
    predictions: &[Prediction],
    denoisers: &mut [D],
    model: &Likelihood<'_>,
    sched: &Schedule,
    t: usize,
    cfg: &GuidanceConfig,
) -> Result<(Vec<Spectrogram>, GuidanceReport)> {
    cfg.validate()?;
    check_sources(xbar_t, denoisers.len())?;
    if predictions.len() != xbar_t.len() {
        return Err(Error::invalid("one prediction per source required"));
    }
    if t == 0 || t > sched.n_steps() {
        return Err(Error::invalid(format!("step {t} outside 1..={}", sched.n_steps())));
    }
    if cfg.grad_mode == GradMode::FullVjp {
        if let Some(k) = denoisers.iter().position(|d| !d.supports_vjp()) {
            return Err(Error::Capability(format!("denoiser for source {k} has no vector-Jacobian product")));
        }
    }
    let clean: Vec<Spectrogram> = predictions.iter().map(|p| p.clean.clone()).collect();
    let state = model.evaluate(&clean, None)?;
    let scores = model.clean_score(&state, cfg.differentiate_through_fcp, cfg.eps_mag)?;
    let inv_a = 1.0 / sched.alpha_bar(t).sqrt();
    let mut grads = Vec::with_capacity(scores.len());
    for (k, g) in scores.into_iter().enumerate() {
        let pulled = match cfg.grad_mode {
            GradMode::Detached => g.scaled(inv_a),
            GradMode::FullVjp => denoisers[k].clean_vjp(&xbar_t[k], t, sched, &g)?,
        };
        grads.push(pulled);
    }
    let report = GuidanceReport {
        t,
        quadratic_value: state.value(),
        grad_norms: grads.iter().map(Spectrogram::norm).collect(),
        fcp_solve_failures: state.solve_failures(),
    };
    Ok((grads, report))
}

/// Likelihood score `G_k = −½ ∇_{x̄_t^k} f` at the states `xbar_t`.
pub fn likelihood_grad<D: Denoiser>(
    xbar_t: &[Spectrogram],
    denoisers: &mut [D],
    model: &Likelihood<'_>,
    sched: &Schedule,
    t: usize,
    cfg: &GuidanceConfig,
) -> Result<(Vec<Spectrogram>, GuidanceReport)> {
    check_sources(xbar_t, denoisers.len())?;
    let predictions = xbar_t
        .iter()
        .zip(denoisers.iter_mut())
        .map(|(x, d)| d.predict(x, t, sched))
        .collect::<Result<Vec<_>>>()?;
    likelihood_grad_with(xbar_t, &predictions, denoisers, model, sched, t, cfg)
}

/// `x + ξ · (1 − α)/sqrt(α) · G` per source; `ξ = 0` returns the input as is.
pub fn apply_guidance(x_prev: &[Spectrogram], grads: &[Spectrogram], step: &Transition, xi: f64) -> Result<Vec<Spectrogram>> {
    if x_prev.len() != grads.len() {
        return Err(Error::invalid("one gradient per source required"));
    }
    if xi == 0.0 {
        return Ok(x_prev.to_vec());
    }
    let scale = xi * (1.0 - step.alpha) / step.alpha.sqrt();
    x_prev
        .iter()
        .zip(grads)
        .map(|(x, g)| {
            x.check_same_shape(g, "guidance gradient")?;
            let mut out = x.clone();
            out.add_scaled(scale, g);
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub source: usize,
    pub freq: usize,
    pub frame: usize,
    pub imag: bool,
    pub finite_diff: f64,
    pub analytic: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
    /// Draws rejected because the stencil came too close to a zero of the
    /// compressed clean estimate, where `x ↦ |x|·x` is not smooth enough for
    /// central differences.
    pub skipped: usize,
}

/// A probe is kept only if the clean estimate at the probed bin is this many
/// times larger than its change across the stencil.
pub const KINK_MARGIN: f64 = 30.0;

/// Relative error with a floor tied to the overall gradient scale.
fn rel_error(fd: f64, an: f64, floor: f64) -> f64 {
    let diff = (fd - an).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / fd.abs().max(an.abs()).max(floor)
}

/// Compares [`likelihood_grad`] against central differences of the scalar
/// chain on `n_probes` random coordinates.
///
/// The scalar is evaluated consistently with the selected mode: in detached
/// mode the noise estimate is frozen at `xbar_t`, so the state moves by
/// `h·sqrt(ᾱ_t)` and the clean estimate by `h`; filters are frozen unless
/// `differentiate_through_fcp` is set. Only the probed frequency row is
/// differenced, so unaffected rows cancel exactly.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check<D: Denoiser>(
    xbar_t: &[Spectrogram],
    denoisers: &mut [D],
    model: &Likelihood<'_>,
    sched: &Schedule,
    t: usize,
    cfg: &GuidanceConfig,
    n_probes: usize,
    h: f64,
    seed: u64,
) -> Result<FiniteDiffReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    check_sources(xbar_t, denoisers.len())?;
    let predictions = xbar_t
        .iter()
        .zip(denoisers.iter_mut())
        .map(|(x, d)| d.predict(x, t, sched))
        .collect::<Result<Vec<_>>>()?;
    let (grads, _) = likelihood_grad_with(xbar_t, &predictions, denoisers, model, sched, t, cfg)?;
    let base_clean: Vec<Spectrogram> = predictions.iter().map(|p| p.clean.clone()).collect();
    let base = model.evaluate(&base_clean, None)?;
    let frozen = (!cfg.differentiate_through_fcp).then(|| base.fcp.clone());
    let sqrt_ab = sched.alpha_bar(t).sqrt();

    let scale = grads
        .iter()
        .flat_map(|g| g.data().iter().map(|z| z.re.abs().max(z.im.abs())))
        .fold(0.0, f64::max);
    let floor = 1e-8 * scale + f64::MIN_POSITIVE;

    let mut rng = substream(seed, Purpose::Probe, 0, 0);
    let (n_f, n_l) = xbar_t[0].shape();
    let sources: Vec<usize> = (0..xbar_t.len()).collect();
    let mut probes = Vec::with_capacity(n_probes);
    let mut skipped = 0;
    let max_draws = 100 * n_probes.max(1);
    while probes.len() < n_probes && probes.len() + skipped < max_draws {
        let k = *sources.choose(&mut rng).expect("non-empty");
        let (f, l) = (rng.random_range(0..n_f), rng.random_range(0..n_l));
        let imag = rng.random_bool(0.5);
        let unit = if imag { Complex64::new(0.0, 1.0) } else { Complex64::new(1.0, 0.0) };
        // step taken in x̄_t; the derivative is per unit of x̄_t
        let step = match cfg.grad_mode {
            GradMode::Detached => h * sqrt_ab,
            GradMode::FullVjp => h,
        };
        let mut stencil = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut clean = base_clean.clone();
            match cfg.grad_mode {
                GradMode::Detached => clean[k].data_mut()[[f, l]] += unit * (sign * step / sqrt_ab),
                GradMode::FullVjp => {
                    let mut x = xbar_t[k].clone();
                    x.data_mut()[[f, l]] += unit * (sign * step);
                    clean[k] = denoisers[k].predict(&x, t, sched)?.clean;
                }
            }
            stencil.push(clean);
        }
        let c0 = base_clean[k].data()[[f, l]];
        let dev = stencil.iter().map(|c| (c[k].data()[[f, l]] - c0).norm()).fold(0.0, f64::max);
        if dev > 0.0 && c0.norm() <= KINK_MARGIN * dev {
            skipped += 1;
            continue;
        }
        let mut row = [0.0; 2];
        for (slot, clean) in row.iter_mut().zip(&stencil) {
            *slot = model.evaluate(clean, frozen.as_deref())?.per_freq[f];
        }
        let fd = -0.5 * (row[0] - row[1]) / (2.0 * step);
        let g = grads[k].data()[[f, l]];
        let an = if imag { g.im } else { g.re };
        probes.push(ProbeResult { source: k, freq: f, frame: l, imag, finite_diff: fd, analytic: an, rel_error: rel_error(fd, an, floor) });
    }
    if probes.len() < n_probes {
        return Err(Error::Numerical(format!("only {} of {n_probes} probes lie away from zeros of the clean estimate", probes.len())));
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(FiniteDiffReport { max_rel_error, probes, skipped })
}

/// Sum of `‖G_k‖²` across sources.
pub fn total_norm_sqr(grads: &[Spectrogram]) -> f64 {
    grads.iter().map(Spectrogram::norm_sqr).sum()
}
