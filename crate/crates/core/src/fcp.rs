//! Forward convolutive prediction (FCP).
//!
//! For every frequency `f` and channel `c`, FCP finds the multi-frame filter
//! `h` minimizing
//!
//! ```text
//! Σ_l (1/λ[l,f]) · |Y_c(l,f) − Σ_j h(j,f) · X(l + d − j, f)|²
//! ```
//!
//! where `d` is the number of look-ahead taps (zero for a causal filter),
//! frames outside `[0, L)` are zero, and `λ` is the channel-mean power of the
//! target floored by `γ` times its maximum. The Gram matrix only depends on the
//! source and the weights, so it is factored once per frequency and reused for
//! all channels.

use ndarray::{s, Array2, Array3, ArrayView1, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::spectral::{MultiSpectrogram, Spectrogram};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Bound on `‖Gram·h − rhs‖ / ‖rhs‖` after a solve.
pub const NORMAL_RESIDUAL_TOL: f64 = 1e-8;
/// Bound on `|⟨a_i, r/λ⟩| / (‖a_i‖·‖r/λ‖)` for every regressor `a_i`.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
/// Scale of the random filter perturbations in the optimality check.
pub const PERTURBATION_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcpConfig {
    /// Filter length in frames.
    pub n_taps: usize,
    /// Weight floor relative to the peak target power.
    pub gamma: f64,
    /// Number of non-causal (future) taps.
    pub lookahead: usize,
    /// Tikhonov ridge relative to `trace(Gram) / n_taps`.
    pub ridge: f64,
}

impl Default for FcpConfig {
    fn default() -> Self {
        Self { n_taps: 13, gamma: 1e-3, lookahead: 0, ridge: 1e-10 }
    }
}

impl FcpConfig {
    pub fn with_taps(self, n_taps: usize) -> Self {
        Self { n_taps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_taps == 0 {
            return Err(Error::invalid("FCP needs at least one tap"));
        }
        if self.lookahead >= self.n_taps {
            return Err(Error::invalid("FCP lookahead must be smaller than the tap count"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid("FCP gamma must be finite and non-negative"));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::invalid("FCP ridge must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-channel multi-frame filter bank, `C × N_H × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtfFilter {
    taps: Array3<Complex64>,
    lookahead: usize,
}

impl AtfFilter {
    pub fn new(taps: Array3<Complex64>, lookahead: usize) -> Result<Self> {
        let (c, n, f) = taps.dim();
        if c == 0 || n == 0 || f == 0 {
            return Err(Error::invalid("filter dimensions must be non-zero"));
        }
        if lookahead >= n {
            return Err(Error::invalid("lookahead must be smaller than the tap count"));
        }
        if taps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("filter contains non-finite taps"));
        }
        Ok(Self { taps, lookahead })
    }

    pub fn zeros(n_channels: usize, n_taps: usize, n_freqs: usize) -> Self {
        Self { taps: Array3::zeros((n_channels, n_taps, n_freqs)), lookahead: 0 }
    }

    /// Unit first tap on every channel and frequency.
    pub fn delta(n_channels: usize, n_taps: usize, n_freqs: usize) -> Self {
        let mut f = Self::zeros(n_channels, n_taps, n_freqs);
        f.taps.index_axis_mut(Axis(1), 0).fill(Complex64::new(1.0, 0.0));
        f
    }

    pub fn taps(&self) -> &Array3<Complex64> {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.taps
    }

    pub fn lookahead(&self) -> usize {
        self.lookahead
    }

    pub fn n_channels(&self) -> usize {
        self.taps.dim().0
    }

    pub fn n_taps(&self) -> usize {
        self.taps.dim().1
    }

    pub fn n_freqs(&self) -> usize {
        self.taps.dim().2
    }
}

/// Result of a lenient FCP solve: frequencies whose normal equations could not
/// be solved get all-zero taps and are listed in `failed_freqs`.
#[derive(Debug, Clone)]
pub struct FcpSolution {
    pub filter: AtfFilter,
    pub failed_freqs: Vec<usize>,
}

/// Inverse weights `λ[f, l]`: channel-mean power plus `gamma` times its maximum.
pub fn fcp_weights(mixture: &MultiSpectrogram, gamma: f64) -> Result<Array2<f64>> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite and non-negative"));
    }
    let n_ch = mixture.n_channels() as f64;
    let power = mixture.data().map_axis(Axis(0), |v| v.iter().map(|z| z.norm_sqr()).sum::<f64>() / n_ch);
    let peak = power.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 && gamma == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(power.mapv(|p| p + gamma * peak))
}

/// Regressor `i` at frame `l`: `x[l + d − i]`, zero outside the signal.
#[inline]
fn lagged(x: &ArrayView1<'_, Complex64>, l: usize, i: usize, lookahead: usize) -> Complex64 {
    let idx = l + lookahead;
    if idx < i || idx - i >= x.len() {
        ZERO
    } else {
        x[idx - i]
    }
}

struct Normal {
    gram: Vec<Complex64>,
    ridge: f64,
}

/// Weighted Gram matrix `Σ_l w_l a(l)^* a(l)^T` plus the relative ridge.
fn normal_matrix(x: &ArrayView1<'_, Complex64>, w: &ArrayView1<'_, f64>, n: usize, lookahead: usize, ridge: f64) -> Normal {
    let mut gram = vec![ZERO; n * n];
    // zero-padded copy: x[l + d − i] is xp[n + l + d − i]
    let mut xp = vec![ZERO; x.len() + 2 * n + lookahead];
    for (dst, &v) in xp[n..].iter_mut().zip(x.iter()) {
        *dst = v;
    }
    for l in 0..x.len() {
        // a[i] is window[n − 1 − i]
        let window = &xp[l + lookahead + 1..][..n];
        let wl = w[l];
        for i in 0..n {
            let ci = window[n - 1 - i].conj() * wl;
            if ci == ZERO {
                continue;
            }
            for j in i..n {
                gram[i * n + j] += ci * window[n - 1 - j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[i * n + j] = gram[j * n + i].conj();
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i].re).sum();
    let rho = ridge * trace / n as f64;
    for i in 0..n {
        gram[i * n + i] += rho;
    }
    Normal { gram, ridge: rho }
}

fn rhs_for(x: &ArrayView1<'_, Complex64>, w: &ArrayView1<'_, f64>, y: &ArrayView1<'_, Complex64>, n: usize, lookahead: usize) -> Vec<Complex64> {
    let n_l = x.len();
    let wy: Vec<Complex64> = (0..n_l).map(|l| y[l] * w[l]).collect();
    (0..n)
        .map(|i| {
            // frames l with 0 <= l + d - i < n_l
            let lo = i.saturating_sub(lookahead);
            let hi = (n_l + i).saturating_sub(lookahead).min(n_l);
            (lo..hi).map(|l| x[l + lookahead - i].conj() * wy[l]).sum()
        })
        .collect()
}

fn check_inputs(source: &Spectrogram, target: &MultiSpectrogram, lambda: &Array2<f64>, cfg: &FcpConfig) -> Result<()> {
    cfg.validate()?;
    if !target.matches(source) {
        return Err(Error::invalid(format!(
            "FCP source {:?} and target {:?} differ in shape",
            source.shape(),
            (target.n_freqs(), target.n_frames())
        )));
    }
    if lambda.dim() != source.shape() {
        return Err(Error::invalid("FCP weights do not match the source shape"));
    }
    if lambda.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    Ok(())
}

/// Weighted LS solve with per-frequency fallback to zero taps.
pub fn fcp_estimate_weighted(source: &Spectrogram, target: &MultiSpectrogram, lambda: &Array2<f64>, cfg: &FcpConfig) -> Result<FcpSolution> {
    check_inputs(source, target, lambda, cfg)?;
    let n = cfg.n_taps;
    let n_ch = target.n_channels();
    let weights = lambda.mapv(|v| 1.0 / v);
    let per_freq: Vec<Option<Vec<Complex64>>> = (0..source.n_freqs())
        .into_par_iter()
        .map(|f| {
            let x = source.data().row(f);
            let w = weights.row(f);
            let normal = normal_matrix(&x, &w, n, cfg.lookahead, cfg.ridge);
            let chol = linalg::cholesky(&normal.gram, n)?;
            let mut taps = Vec::with_capacity(n_ch * n);
            for c in 0..n_ch {
                let y = target.data().index_axis(Axis(0), c);
                let rhs = rhs_for(&x, &w, &y.row(f), n, cfg.lookahead);
                let h = chol.solve(&nalgebra::DVector::from_column_slice(&rhs));
                taps.extend(h.iter().copied());
            }
            taps.iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(taps)
        })
        .collect();

    let mut taps = Array3::zeros((n_ch, n, source.n_freqs()));
    let mut failed_freqs = Vec::new();
    for (f, sol) in per_freq.into_iter().enumerate() {
        match sol {
            Some(h) => {
                for c in 0..n_ch {
                    for j in 0..n {
                        taps[[c, j, f]] = h[c * n + j];
                    }
                }
            }
            None => failed_freqs.push(f),
        }
    }
    if !failed_freqs.is_empty() {
        log::debug!("FCP: {} frequencies fell back to zero taps", failed_freqs.len());
    }
    Ok(FcpSolution { filter: AtfFilter { taps, lookahead: cfg.lookahead }, failed_freqs })
}

/// FCP filter from `source` to every channel of `target`, with weights derived
/// from the target. Fails on the first unsolvable frequency.
pub fn fcp_estimate(source: &Spectrogram, target: &MultiSpectrogram, cfg: &FcpConfig) -> Result<AtfFilter> {
    cfg.validate()?;
    let lambda = fcp_weights(target, cfg.gamma)?;
    let sol = fcp_estimate_weighted(source, target, &lambda, cfg)?;
    match sol.failed_freqs.first() {
        Some(&freq) => Err(Error::SolveFailure { freq, channel: 0 }),
        None => Ok(sol.filter),
    }
}

/// Like [`fcp_estimate`] but falls back to zero taps on unsolvable bins and
/// reports how many frequencies failed.
pub fn fcp_estimate_lenient(source: &Spectrogram, target: &MultiSpectrogram, cfg: &FcpConfig) -> Result<FcpSolution> {
    cfg.validate()?;
    let lambda = fcp_weights(target, cfg.gamma)?;
    fcp_estimate_weighted(source, target, &lambda, cfg)
}

fn check_filter(n_freqs: usize, filter: &AtfFilter) -> Result<()> {
    if filter.n_freqs() != n_freqs {
        return Err(Error::invalid(format!(
            "filter has {} frequencies, signal has {}",
            filter.n_freqs(),
            n_freqs
        )));
    }
    Ok(())
}

/// Multichannel convolution across frames:
/// `out_c(l, f) = Σ_j h_c(j, f) · x(l + d − j, f)`.
pub fn apply_atf(source: &Spectrogram, filter: &AtfFilter) -> Result<MultiSpectrogram> {
    check_filter(source.n_freqs(), filter)?;
    let (n_ch, n, n_f) = filter.taps.dim();
    let n_l = source.n_frames();
    let d = filter.lookahead;
    let mut out = Array3::zeros((n_ch, n_f, n_l));
    for c in 0..n_ch {
        let mut oc = out.index_axis_mut(Axis(0), c);
        for f in 0..n_f {
            let x = source.data().row(f);
            let mut row = oc.row_mut(f);
            for j in 0..n {
                let h = filter.taps[[c, j, f]];
                if h == ZERO {
                    continue;
                }
                // out(l) += h · x(l + d − j), valid for 0 <= l + d − j < L
                let lo = j.saturating_sub(d);
                let hi = (n_l + j).saturating_sub(d).min(n_l);
                if lo < hi {
                    Zip::from(row.slice_mut(s![lo..hi]))
                        .and(x.slice(s![lo + d - j..hi + d - j]))
                        .for_each(|o, &v| *o += h * v);
                }
            }
        }
    }
    Ok(MultiSpectrogram::from_raw(out, source.params()))
}

/// Adjoint of [`apply_atf`] in the source argument:
/// `out(m, f) = Σ_c Σ_j conj(h_c(j, f)) · r_c(m − d + j, f)`.
pub fn apply_atf_adjoint(residual: &MultiSpectrogram, filter: &AtfFilter) -> Result<Spectrogram> {
    check_filter(residual.n_freqs(), filter)?;
    if residual.n_channels() != filter.n_channels() {
        return Err(Error::invalid(format!(
            "residual has {} channels, filter has {}",
            residual.n_channels(),
            filter.n_channels()
        )));
    }
    let (n_ch, n, n_f) = filter.taps.dim();
    let n_l = residual.n_frames();
    let d = filter.lookahead;
    let mut out = Array2::zeros((n_f, n_l));
    for c in 0..n_ch {
        let rc = residual.channel_view(c);
        for f in 0..n_f {
            let r = rc.row(f);
            let mut row = out.row_mut(f);
            for j in 0..n {
                let hc = filter.taps[[c, j, f]].conj();
                if hc == ZERO {
                    continue;
                }
                // m = l + d − j for l in [0, L)
                let lo = j.saturating_sub(d);
                let hi = (n_l + j).saturating_sub(d).min(n_l);
                if lo < hi {
                    Zip::from(row.slice_mut(s![lo + d - j..hi + d - j]))
                        .and(r.slice(s![lo..hi]))
                        .for_each(|o, &v| *o += hc * v);
                }
            }
        }
    }
    Ok(Spectrogram::from_raw(out, residual.params()))
}

/// Per-frequency weighted FCP objective summed over channels.
pub fn fcp_objective(source: &Spectrogram, target: &MultiSpectrogram, lambda: &Array2<f64>, filter: &AtfFilter) -> Result<Vec<f64>> {
    let pred = apply_atf(source, filter)?;
    if pred.data().dim() != target.data().dim() {
        return Err(Error::invalid("target does not match filter output"));
    }
    let mut obj = vec![0.0; source.n_freqs()];
    for ((c, f, l), y) in target.data().indexed_iter() {
        obj[f] += (y - pred.data()[[c, f, l]]).norm_sqr() / lambda[[f, l]];
    }
    Ok(obj)
}

/// Vector-Jacobian product of the FCP solution with respect to its source.
///
/// `grad_taps` holds the gradient of a real scalar with respect to the taps
/// (`∂/∂Re + j ∂/∂Im` convention); the return value is the gradient of the same
/// scalar with respect to `source`, obtained by implicit differentiation of the
/// normal equations including the trace-relative ridge. The weights are held
/// fixed, matching their dependence on the target only. Frequencies that failed
/// to solve contribute nothing.
pub fn fcp_vjp(source: &Spectrogram, target: &MultiSpectrogram, lambda: &Array2<f64>, cfg: &FcpConfig, solution: &FcpSolution, grad_taps: &Array3<Complex64>) -> Result<Spectrogram> {
    check_inputs(source, target, lambda, cfg)?;
    let filter = &solution.filter;
    if grad_taps.dim() != filter.taps.dim() || filter.n_taps() != cfg.n_taps || filter.lookahead != cfg.lookahead {
        return Err(Error::invalid("FCP vjp: filter or gradient does not match the configuration"));
    }
    let n = cfg.n_taps;
    let d = cfg.lookahead;
    let n_ch = target.n_channels();
    let n_l = source.n_frames();
    let weights = lambda.mapv(|v| 1.0 / v);
    let rows: Vec<Vec<Complex64>> = (0..source.n_freqs())
        .into_par_iter()
        .map(|f| {
            let mut grad = vec![ZERO; n_l];
            if solution.failed_freqs.contains(&f) {
                return grad;
            }
            let x = source.data().row(f);
            let w = weights.row(f);
            let normal = normal_matrix(&x, &w, n, d, cfg.ridge);
            let Some(chol) = linalg::cholesky(&normal.gram, n) else {
                return grad;
            };
            // Σ_j w(m − d + j) over valid frames, the ridge's sensitivity to |x(m)|²
            let wsum: Vec<f64> = (0..n_l)
                .map(|m| (0..n).filter_map(|j| (m + j).checked_sub(d).filter(|&l| l < n_l)).map(|l| w[l]).sum())
                .collect();
            let mut ridge_coef = 0.0;
            for c in 0..n_ch {
                let y = target.data().index_axis(Axis(0), c);
                let y = y.row(f);
                let h: Vec<Complex64> = (0..n).map(|j| filter.taps[[c, j, f]]).collect();
                let g: Vec<Complex64> = (0..n).map(|j| grad_taps[[c, j, f]]).collect();
                let q = chol.solve(&nalgebra::DVector::from_column_slice(&g));
                // weighted residual W (y − A h) and weighted prediction W A q
                let mut wr = vec![ZERO; n_l];
                let mut waq = vec![ZERO; n_l];
                for l in 0..n_l {
                    let mut ah = ZERO;
                    let mut aq = ZERO;
                    for j in 0..n {
                        let a = lagged(&x, l, j, d);
                        ah += a * h[j];
                        aq += a * q[j];
                    }
                    wr[l] = (y[l] - ah) * w[l];
                    waq[l] = aq * w[l];
                }
                for (m, gm) in grad.iter_mut().enumerate() {
                    for j in 0..n {
                        if let Some(l) = (m + j).checked_sub(d).filter(|&l| l < n_l) {
                            *gm += q[j].conj() * wr[l] - h[j].conj() * waq[l];
                        }
                    }
                }
                ridge_coef += (0..n).map(|j| (q[j].conj() * h[j]).re).sum::<f64>();
            }
            if normal.ridge > 0.0 {
                let scale = -ridge_coef * 2.0 * cfg.ridge / n as f64;
                for (m, gm) in grad.iter_mut().enumerate() {
                    *gm += x[m] * (scale * wsum[m]);
                }
            }
            grad
        })
        .collect();
    let mut out = Array2::zeros(source.shape());
    for (f, row) in rows.into_iter().enumerate() {
        out.row_mut(f).assign(&ArrayView1::from(&row[..]));
    }
    Ok(Spectrogram::from_raw(out, source.params()))
}
