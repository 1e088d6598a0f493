//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Positional arguments select criteria by name.
//!
//! Independent oracles (dense least squares, convolutions, scores) are written
//! out here with plain loops and nalgebra rather than reusing library code.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uadps::diffusion::{
    forward_to_step, forward_with_noise, Denoiser, ExternalDenoiser, GaussianPriorDenoiser, OracleDenoiser, Schedule,
    DEFAULT_TIMEOUT,
};
use uadps::fcp::{
    fcp_estimate, fcp_estimate_weighted, fcp_weights, FcpConfig, NORMAL_RESIDUAL_TOL, ORTHOGONALITY_TOL,
    PERTURBATION_SCALE,
};
use uadps::guidance::{finite_diff_check, likelihood_grad, GradMode, GuidanceConfig, Likelihood};
use uadps::harness::{make_scene, permute_match, si_sdr, Scene, SceneSpec};
use uadps::pipeline::{interpolate, prepare_scm, refine, refine_with_scm, RefineConfig, ScmPreparation};
use uadps::rng::{substream, Purpose};
use uadps::scm::{scm_ema, scm_inverse, ScmField};
use uadps::spectral::{compress, synthesize, MultiSpectrogram, Spectrogram, StftParams};
use uadps::{Complex64, Error};

// Frozen thresholds; see the README for the calibration run.
const ENHANCE_GAIN_DB: f64 = 3.0;
const SEPARATE_GAIN_DB: f64 = 2.0;
const N_END_TO_END_SCENES: u64 = 20;
const ENHANCE_SEED0: u64 = 1000;
const SEPARATE_SEED0: u64 = 2000;
const END_TO_END_BUDGET: Duration = Duration::from_secs(15 * 60);

const RECOVERY_TOL: f64 = 1e-6;
const RECOVERY_COND_LIMIT: f64 = 1e8;
const RECOVERY_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const WHITE_SCORE_TOL: f64 = 1e-8;
const SCM_TOL: f64 = 0.1;
const TIMEOUT_SLACK: Duration = Duration::from_secs(2);

type Z = Complex64;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Check = fn() -> Outcome;

const CRITERIA: [(&str, Check); 11] = [
    ("fcp_recovery", fcp_recovery),
    ("fcp_invariants", fcp_invariants),
    ("gradient_finite_differences", gradient_finite_differences),
    ("white_noise_score", white_noise_score),
    ("scm_estimation", scm_estimation),
    ("schedule_identities", schedule_identities),
    ("pipeline_degeneracies", pipeline_degeneracies),
    ("end_to_end_refinement", end_to_end_refinement),
    ("ablation_directions", ablation_directions),
    ("cli_determinism", cli_determinism),
    ("external_denoiser_protocol", external_denoiser_protocol),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !out.pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2} {name}: {} ({:.1} s)",
            if out.pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cn(rng: &mut ChaCha8Rng) -> Z {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Z::new(re * s, im * s)
}

fn params_for(n_f: usize) -> StftParams {
    StftParams::new(2 * n_f, 1, 16_000)
}

fn random_spec(n_f: usize, n_l: usize, rng: &mut ChaCha8Rng) -> Spectrogram {
    Spectrogram::new(Array2::from_shape_simple_fn((n_f, n_l), || cn(rng)), params_for(n_f)).unwrap()
}

fn random_multi(n_c: usize, n_f: usize, n_l: usize, rng: &mut ChaCha8Rng) -> MultiSpectrogram {
    MultiSpectrogram::new(Array3::from_shape_simple_fn((n_c, n_f, n_l), || cn(rng)), params_for(n_f)).unwrap()
}

/// `x[l + d − j]`, zero outside the signal.
fn lag(x: &Array2<Z>, f: usize, l: usize, j: usize, d: usize) -> Z {
    let n_l = x.ncols();
    match (l + d).checked_sub(j) {
        Some(m) if m < n_l => x[[f, m]],
        _ => Z::new(0.0, 0.0),
    }
}

/// `y_c(l, f) = Σ_j h_c(j, f) · x(l + d − j, f)` by direct summation.
fn convolve(x: &Array2<Z>, taps: &Array3<Z>, d: usize) -> Array3<Z> {
    let (n_c, n, n_f) = taps.dim();
    let n_l = x.ncols();
    Array3::from_shape_fn((n_c, n_f, n_l), |(c, f, l)| (0..n).map(|j| taps[[c, j, f]] * lag(x, f, l, j, d)).sum())
}

/// Channel-mean target power floored by `gamma` times its peak.
fn weights(y: &Array3<Z>, gamma: f64) -> Array2<f64> {
    let (n_c, n_f, n_l) = y.dim();
    let p = Array2::from_shape_fn((n_f, n_l), |(f, l)| (0..n_c).map(|c| y[[c, f, l]].norm_sqr()).sum::<f64>() / n_c as f64);
    let peak = p.iter().copied().fold(0.0, f64::max);
    p.mapv(|v| v + gamma * peak)
}

/// Dense weighted normal equations at frequency `f`: `(Gram, rhs per channel)`.
fn normal_equations(x: &Array2<Z>, y: &Array3<Z>, lam: &Array2<f64>, f: usize, n: usize, d: usize) -> (DMatrix<Z>, Vec<DVector<Z>>) {
    let n_l = x.ncols();
    let a = DMatrix::from_fn(n_l, n, |l, j| lag(x, f, l, j, d));
    let w = DVector::from_fn(n_l, |l, _| Z::new(1.0 / lam[[f, l]], 0.0));
    let aw = DMatrix::from_fn(n_l, n, |l, j| a[(l, j)] * w[l]);
    let gram = a.adjoint() * &aw;
    let rhs = (0..y.dim().0)
        .map(|c| aw.adjoint() * DVector::from_fn(n_l, |l, _| y[[c, f, l]]))
        .collect();
    (gram, rhs)
}

fn condition_number(gram: &DMatrix<Z>) -> f64 {
    let ev = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn fcp_recovery() -> Outcome {
    let (n_c, n_f, n_l, n) = (4, 256, 256, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_spec(n_f, n_l, &mut rng);
    let taps = Array3::from_shape_simple_fn((n_c, n, n_f), || cn(&mut rng));

    let start = Instant::now();
    let y = convolve(x.data(), &taps, 0);
    let target = MultiSpectrogram::new(y.clone(), x.params()).unwrap();
    let est = single_thread(|| fcp_estimate(&x, &target, &FcpConfig::default().with_taps(n)));
    let elapsed = start.elapsed();
    let est = match est {
        Ok(h) => h,
        Err(e) => return Outcome::new(false, format!("solve failed: {e}")),
    };

    let lam = weights(&y, FcpConfig::default().gamma);
    let (mut worst, mut good) = (0.0f64, 0);
    for f in 0..n_f {
        let (gram, _) = normal_equations(x.data(), &y, &lam, f, n, 0);
        if condition_number(&gram) >= RECOVERY_COND_LIMIT {
            continue;
        }
        good += 1;
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..n_c {
            for j in 0..n {
                num += (est.taps()[[c, j, f]] - taps[[c, j, f]]).norm_sqr();
                den += taps[[c, j, f]].norm_sqr();
            }
        }
        worst = worst.max((num / den).sqrt());
    }
    let pass = good > 0 && worst < RECOVERY_TOL && elapsed < RECOVERY_BUDGET;
    Outcome::new(
        pass,
        format!(
            "{good}/{n_f} bins with cond < {RECOVERY_COND_LIMIT:e}, max rel error {worst:.2e} (< {RECOVERY_TOL:e}), construct+recover {:.2} s (< {} s, 1 thread)",
            elapsed.as_secs_f64(),
            RECOVERY_BUDGET.as_secs()
        ),
    )
}

fn objective(x: &Array2<Z>, y: &Array3<Z>, lam: &Array2<f64>, taps: &Array3<Z>, d: usize) -> Vec<f64> {
    let pred = convolve(x, taps, d);
    let (n_c, n_f, n_l) = y.dim();
    (0..n_f)
        .map(|f| {
            let mut s = 0.0;
            for c in 0..n_c {
                for l in 0..n_l {
                    s += (y[[c, f, l]] - pred[[c, f, l]]).norm_sqr() / lam[[f, l]];
                }
            }
            s
        })
        .collect()
}

fn fcp_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_normal, mut worst_orth, mut beaten) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..50 {
        let n_c = rng.random_range(1..=4);
        let n_f = [2, 4, 8][rng.random_range(0..3)];
        let n_l = rng.random_range(20..=60);
        let n = rng.random_range(1..=5);
        let d = if n > 1 && rng.random_bool(0.3) { 1 } else { 0 };
        let gamma = [0.0, 1e-3, 0.1][rng.random_range(0..3)];
        let cfg = FcpConfig { n_taps: n, lookahead: d, gamma, ..FcpConfig::default() };
        let x = random_spec(n_f, n_l, &mut rng);
        let y = random_multi(n_c, n_f, n_l, &mut rng);
        let lam_lib = fcp_weights(&y, gamma).unwrap();
        let sol = fcp_estimate_weighted(&x, &y, &lam_lib, &cfg).unwrap();
        let taps = sol.filter.taps().clone();
        let lam = weights(y.data(), gamma);

        let base = objective(x.data(), y.data(), &lam, &taps, d);
        for _ in 0..100 {
            let e = PERTURBATION_SCALE;
            let pert = taps.mapv(|z| z + Z::new(rng.random_range(-e..e), rng.random_range(-e..e)));
            let obj = objective(x.data(), y.data(), &lam, &pert, d);
            beaten += base.iter().zip(&obj).filter(|(b, p)| b > p).count();
        }

        let pred = convolve(x.data(), &taps, d);
        for f in 0..n_f {
            let (gram, rhs) = normal_equations(x.data(), y.data(), &lam, f, n, d);
            for c in 0..n_c {
                let h = DVector::from_fn(n, |j, _| taps[[c, j, f]]);
                worst_normal = worst_normal.max((&gram * h - &rhs[c]).norm() / rhs[c].norm());
                let r: Vec<Z> = (0..n_l).map(|l| (y.data()[[c, f, l]] - pred[[c, f, l]]) / lam[[f, l]]).collect();
                let nr: f64 = r.iter().map(|z| z.norm_sqr()).sum();
                for j in 0..n {
                    let dot: Z = (0..n_l).map(|l| lag(x.data(), f, l, j, d).conj() * r[l]).sum();
                    let na: f64 = (0..n_l).map(|l| lag(x.data(), f, l, j, d).norm_sqr()).sum();
                    if na > 0.0 && nr > 0.0 {
                        worst_orth = worst_orth.max(dot.norm() / (na * nr).sqrt());
                    }
                }
            }
        }
    }
    let pass = beaten == 0 && worst_normal < NORMAL_RESIDUAL_TOL && worst_orth < ORTHOGONALITY_TOL;
    Outcome::new(
        pass,
        format!(
            "50 scenes: {beaten} perturbations beat the solution, normal residual {worst_normal:.1e} (< {NORMAL_RESIDUAL_TOL:e}), orthogonality {worst_orth:.1e} (< {ORTHOGONALITY_TOL:e})"
        ),
    )
}

fn prior_variance(specs: &[Spectrogram]) -> f64 {
    let (s, n) = specs.iter().fold((0.0, 0usize), |(s, n), x| {
        let c = compress(x);
        (s + c.norm_sqr(), n + c.data().len())
    });
    s / (2.0 * n as f64)
}

fn gradient_finite_differences() -> Outcome {
    let sched = Schedule::default();
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut runs = 0;
    let mut skipped = 0;
    for i in 0..10u64 {
        let spec = SceneSpec { seed: 300 + i, n_sources: 1 + (i % 2) as usize, duration_s: 0.5, ..SceneSpec::default() };
        let scene = make_scene(&spec).unwrap();
        let t = [100, 300, 600][(i % 3) as usize];
        let fcp = FcpConfig::default();
        let prep = prepare_scm(&scene.mixture, &scene.pseudo, &fcp, 0.95).unwrap();
        let model = Likelihood::new(&scene.mixture, &prep.inverse, fcp).unwrap();
        let xbar: Vec<Spectrogram> = scene
            .pseudo
            .iter()
            .enumerate()
            .map(|(k, x)| forward_to_step(&compress(x), t, &sched, &mut substream(spec.seed, Purpose::ForwardInit, k, 0)).unwrap())
            .collect();
        let v = prior_variance(&scene.pseudo);
        for mode in [GradMode::Detached, GradMode::FullVjp] {
            let cfg = GuidanceConfig { grad_mode: mode, ..GuidanceConfig::default() };
            let mut oracle: Vec<OracleDenoiser> = scene.clean.iter().map(|c| OracleDenoiser::new(compress(c), sched.clone())).collect();
            let r = finite_diff_check(&xbar, &mut oracle, &model, &sched, t, &cfg, 64, 1e-4, spec.seed).unwrap();
            worst = worst.max(r.max_rel_error);
            skipped += r.skipped;
            let mut gauss: Vec<GaussianPriorDenoiser> =
                scene.clean.iter().map(|_| GaussianPriorDenoiser::scalar(v, sched.clone()).unwrap()).collect();
            let r = finite_diff_check(&xbar, &mut gauss, &model, &sched, t, &cfg, 64, 1e-4, spec.seed + 1).unwrap();
            worst = worst.max(r.max_rel_error);
            skipped += r.skipped;
            runs += 2;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < GRAD_TOL && elapsed < GRAD_BUDGET;
    Outcome::new(
        pass,
        format!(
            "{runs} runs (10 scenes x oracle/gaussian x detached/vjp) x 64 probes ({skipped} near-zero draws redrawn), max rel error {worst:.2e} (< {GRAD_TOL:e}), {:.1} s (< {} s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

/// Linear-beta cumulative product, computed directly.
fn alpha_bar(t: usize) -> f64 {
    (1..=t).map(|s| 1.0 - (1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / 999.0)).product()
}

/// White-noise score in the detached chain with a scalar Gaussian prior of
/// per-component variance `v`:
/// `G_k = (1/(sqrt(ᾱ) σ²)) J_k^T Σ_c conj(h_kc) ⋆ (Y_c − Σ_k' h_k'c * X̂_k')`,
/// with `X̂ = c|c|`, `c = sqrt(ᾱ) v / (ᾱ v + 1 − ᾱ) · x̄`, and `h` the
/// unregularized weighted least-squares fit of each `X̂_k` to `Y`.
fn white_score_oracle(xbar: &[Array2<Z>], y: &Array3<Z>, sigma2: f64, v: f64, t: usize, cfg: &FcpConfig) -> Vec<Array2<Z>> {
    let ab = alpha_bar(t);
    let shrink = ab.sqrt() * v / (ab * v + 1.0 - ab);
    let (n_c, n_f, n_l) = y.dim();
    let n = cfg.n_taps;
    let lam = weights(y, cfg.gamma);
    let comp: Vec<Array2<Z>> = xbar.iter().map(|x| x.mapv(|z| z * shrink)).collect();
    let clean: Vec<Array2<Z>> = comp.iter().map(|c| c.mapv(|z| z * z.norm())).collect();
    let mut filters = Vec::new();
    for x in &clean {
        let mut taps = Array3::zeros((n_c, n, n_f));
        for f in 0..n_f {
            let (gram, rhs) = normal_equations(x, y, &lam, f, n, 0);
            let chol = gram.cholesky().expect("positive definite Gram");
            for c in 0..n_c {
                let h = chol.solve(&rhs[c]);
                for j in 0..n {
                    taps[[c, j, f]] = h[j];
                }
            }
        }
        filters.push(taps);
    }
    let mut resid = y.clone();
    for (x, taps) in clean.iter().zip(&filters) {
        resid -= &convolve(x, taps, 0);
    }
    comp.iter()
        .zip(&filters)
        .map(|(c, taps)| {
            Array2::from_shape_fn((n_f, n_l), |(f, m)| {
                let mut g = Z::new(0.0, 0.0);
                for ch in 0..n_c {
                    for j in 0..n {
                        if m + j < n_l {
                            g += taps[[ch, j, f]].conj() * resid[[ch, f, m + j]];
                        }
                    }
                }
                g /= sigma2;
                let z = c[[f, m]];
                let r = z.norm();
                let back = g * r + z * ((z.re * g.re + z.im * g.im) / r);
                back / ab.sqrt()
            })
        })
        .collect()
}

fn white_noise_score() -> Outcome {
    let sched = Schedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n_c = rng.random_range(2..=4);
        let n_k = rng.random_range(1..=2);
        let n_f = [4, 8][rng.random_range(0..2)];
        let n_l = rng.random_range(24..=40);
        let t = rng.random_range(50..=600);
        let sigma2 = rng.random_range(0.5..2.0);
        let v = rng.random_range(0.5..2.0);
        let cfg = FcpConfig { n_taps: 3, ..FcpConfig::default() };
        let y = random_multi(n_c, n_f, n_l, &mut rng);
        let xbar: Vec<Spectrogram> = (0..n_k).map(|_| random_spec(n_f, n_l, &mut rng)).collect();
        let inv = ScmField::identity(n_l, n_f, n_c, 1.0 / sigma2);
        let model = Likelihood::new(&y, &inv, cfg).unwrap();
        let mut dens: Vec<GaussianPriorDenoiser> = (0..n_k).map(|_| GaussianPriorDenoiser::scalar(v, sched.clone()).unwrap()).collect();
        let gcfg = GuidanceConfig { grad_mode: GradMode::Detached, ..GuidanceConfig::default() };
        let (grads, _) = likelihood_grad(&xbar, &mut dens, &model, &sched, t, &gcfg).unwrap();
        let raw: Vec<Array2<Z>> = xbar.iter().map(|x| x.data().clone()).collect();
        let expect = white_score_oracle(&raw, y.data(), sigma2, v, t, &cfg);
        let num: f64 = grads.iter().zip(&expect).map(|(g, e)| (g.data() - e).iter().map(|z| z.norm_sqr()).sum::<f64>()).sum();
        let den: f64 = expect.iter().map(|e| e.iter().map(|z| z.norm_sqr()).sum::<f64>()).sum();
        worst = worst.max((num / den).sqrt());
    }
    Outcome::new(worst < WHITE_SCORE_TOL, format!("10 instances, max rel difference {worst:.2e} (< {WHITE_SCORE_TOL:e})"))
}

fn scm_estimation() -> Outcome {
    let (n_c, n_f, n_l) = (4, 4, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut data = Array3::zeros((n_c, n_f, n_l));
    let mut truth = Vec::new();
    for f in 0..n_f {
        let b = DMatrix::from_fn(n_c, n_c, |_, _| cn(&mut rng));
        let p = &b * b.adjoint() + DMatrix::identity(n_c, n_c) * Z::new(0.1, 0.0);
        let chol = p.clone().cholesky().unwrap().l();
        for l in 0..n_l {
            let w = DVector::from_fn(n_c, |_, _| cn(&mut rng));
            let n = &chol * w;
            for c in 0..n_c {
                data[[c, f, l]] = n[c];
            }
        }
        truth.push(p);
    }
    let noise = MultiSpectrogram::new(data, params_for(n_f)).unwrap();
    let phi = scm_ema(&noise, 0.95).unwrap();
    let late = n_l / 2..n_l;
    for (f, p) in truth.iter().enumerate() {
        let mut avg = DMatrix::<Z>::zeros(n_c, n_c);
        for l in late.clone() {
            for i in 0..n_c {
                for j in 0..n_c {
                    avg[(i, j)] += phi.cov()[[l, f, i, j]] / late.len() as f64;
                }
            }
        }
        worst = worst.max((avg - p).norm() / p.norm());
    }
    Outcome::new(
        worst < SCM_TOL,
        format!("C=4, eta=0.95, 2000 frames, {n_f} bins: late-frame average within {:.1}% of P (< {:.0}%)", 100.0 * worst, 100.0 * SCM_TOL),
    )
}

fn schedule_identities() -> Outcome {
    let sched = Schedule::default();
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, what: String| {
        pass &= ok;
        if !ok {
            notes.push(what);
        }
    };
    check(sched.n_steps() == 1000, format!("T = {}", sched.n_steps()));
    check((sched.beta(1) - 1e-4).abs() < 1e-18, format!("beta_1 = {}", sched.beta(1)));
    check((sched.beta(1000) - 0.02).abs() < 1e-15, format!("beta_T = {}", sched.beta(1000)));
    check(sched.sigma(1) == 0.0, format!("sigma_1 = {}", sched.sigma(1)));
    check(sched.alpha_bar(1000) < 1e-4, format!("alpha_bar_T = {}", sched.alpha_bar(1000)));
    let rel = (sched.alpha_bar(1000) - alpha_bar(1000)).abs() / alpha_bar(1000);
    check(rel < 1e-10, format!("alpha_bar_T differs from the direct product by {rel:e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = random_spec(8, 16, &mut rng);
    let eps = random_spec(8, 16, &mut rng);
    let mut oracle = OracleDenoiser::new(x0.clone(), sched.clone());
    let mut inexact = 0;
    for t in 1..=sched.n_steps() {
        let xt = forward_with_noise(&x0, &eps, t, &sched).unwrap();
        if oracle.predict(&xt, t, &sched).unwrap().clean != x0 {
            inexact += 1;
        }
    }
    check(inexact == 0, format!("oracle denoise differs from x0 at {inexact} steps"));
    let detail = if notes.is_empty() {
        format!("T=1000, beta 1e-4..0.02, sigma_1=0, alpha_bar_T={:.2e}, oracle denoise bit-exact for t=1..1000", sched.alpha_bar(1000))
    } else {
        notes.join("; ")
    };
    Outcome::new(pass, detail)
}

fn oracles(scene: &Scene, sched: &Schedule) -> Vec<OracleDenoiser> {
    scene.clean.iter().map(|c| OracleDenoiser::new(compress(c), sched.clone())).collect()
}

fn random_pd_field(n_l: usize, n_f: usize, n_c: usize, rng: &mut ChaCha8Rng) -> ScmField {
    let mut cov = Array4::zeros((n_l, n_f, n_c, n_c));
    for l in 0..n_l {
        for f in 0..n_f {
            let b = DMatrix::from_fn(n_c, n_c, |_, _| cn(rng));
            let p = &b * b.adjoint() + DMatrix::identity(n_c, n_c) * Z::new(0.5, 0.0);
            for i in 0..n_c {
                for j in 0..n_c {
                    cov[[l, f, i, j]] = p[(i, j)];
                }
            }
        }
    }
    ScmField::new(cov, 0.95, 1e-4).unwrap()
}

fn pipeline_degeneracies() -> Outcome {
    let sched = Schedule::default();
    let scene = make_scene(&SceneSpec { seed: 7, n_sources: 2, duration_s: 0.5, ..SceneSpec::default() }).unwrap();
    let mut notes = Vec::new();

    let cfg = RefineConfig { alpha: 1.0, ..RefineConfig::default() };
    let r = refine(&scene.mixture, &scene.pseudo, &mut oracles(&scene, &sched), &cfg, &sched).unwrap();
    let pass_through = r.refined == scene.pseudo;
    notes.push(format!("alpha=1 bit-exact: {pass_through}"));

    let cfg = RefineConfig { t_start: 0, ..RefineConfig::default() };
    let r = refine(&scene.mixture, &scene.pseudo, &mut oracles(&scene, &sched), &cfg, &sched).unwrap();
    let err = r
        .refined
        .iter()
        .zip(&scene.pseudo)
        .map(|(a, b)| (a.data() - b.data()).iter().map(|z| z.norm()).fold(0.0, f64::max) / b.data().iter().map(|z| z.norm()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let t0 = err < 1e-10;
    notes.push(format!("T'=0 max rel deviation {err:.1e} (< 1e-10)"));

    let (n_f, n_l) = scene.pseudo[0].shape();
    let n_c = scene.mixture.n_channels();
    let prep = prepare_scm(&scene.mixture, &scene.pseudo, &FcpConfig::default(), 0.95).unwrap();
    let ident = ScmPreparation {
        scm: ScmField::identity(n_l, n_f, n_c, 1.0),
        inverse: ScmField::identity(n_l, n_f, n_c, 1.0),
        filters: prep.filters.clone(),
        fcp_failures: 0,
    };
    let field = random_pd_field(n_l, n_f, n_c, &mut ChaCha8Rng::seed_from_u64(7));
    let random = ScmPreparation { inverse: scm_inverse(&field).unwrap(), scm: field, filters: prep.filters, fcp_failures: 0 };
    let cfg = RefineConfig { xi: 0.0, ..RefineConfig::default() };
    let a = refine_with_scm(&scene.mixture, &scene.pseudo, &mut oracles(&scene, &sched), &cfg, &sched, ident).unwrap();
    let b = refine_with_scm(&scene.mixture, &scene.pseudo, &mut oracles(&scene, &sched), &cfg, &sched, random).unwrap();
    let xi0 = a.refined == b.refined && a.dps_raw == b.dps_raw && a.reports.is_empty();
    notes.push(format!("xi=0 identical under SCM I vs random PD: {xi0}"));

    Outcome::new(pass_through && t0 && xi0, notes.join(", "))
}

/// Input and refined SI-SDR for one scene, matched by the best permutation.
fn scene_gain(scene: &Scene, sched: &Schedule) -> (f64, f64) {
    let cfg = RefineConfig::default();
    let r = refine(&scene.mixture, &scene.pseudo, &mut oracles(scene, sched), &cfg, sched).unwrap();
    let refs: Vec<Vec<f64>> = (0..scene.clean.len()).map(|k| scene.clean_waveform(k).unwrap()).collect();
    let inputs: Vec<Vec<f64>> = (0..scene.clean.len()).map(|k| scene.pseudo_waveform(k).unwrap()).collect();
    let outputs: Vec<Vec<f64>> = r.refined.iter().map(|s| synthesize(s, scene.n_samples).unwrap()).collect();
    (permute_match(&inputs, &refs).unwrap().mean, permute_match(&outputs, &refs).unwrap().mean)
}

fn end_to_end_refinement() -> Outcome {
    let sched = Schedule::default();
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for (n_sources, seed0, gain) in [(1, ENHANCE_SEED0, ENHANCE_GAIN_DB), (2, SEPARATE_SEED0, SEPARATE_GAIN_DB)] {
        let (mut inp, mut out) = (0.0, 0.0);
        for i in 0..N_END_TO_END_SCENES {
            let spec = SceneSpec { seed: seed0 + i, n_sources, ..SceneSpec::default() };
            let (a, b) = scene_gain(&make_scene(&spec).unwrap(), &sched);
            inp += a;
            out += b;
        }
        let n = N_END_TO_END_SCENES as f64;
        let (inp, out) = (inp / n, out / n);
        pass &= out >= inp + gain;
        lines.push(format!("K={n_sources}: {inp:.2} -> {out:.2} dB (need +{gain})"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < END_TO_END_BUDGET;
    lines.push(format!("{:.0} s (< {} s)", elapsed.as_secs_f64(), END_TO_END_BUDGET.as_secs()));
    Outcome::new(pass, format!("{N_END_TO_END_SCENES} scenes each, {}", lines.join(", ")))
}

fn ablation_directions() -> Outcome {
    let sched = Schedule::default();
    let mut monotone = 0;
    let mut residuals = Vec::new();
    let seeds = [900u64, 901, 902];
    for seed in seeds {
        let scene = make_scene(&SceneSpec { seed, duration_s: 0.5, ..SceneSpec::default() }).unwrap();
        let v = prior_variance(&scene.pseudo);
        let res: Vec<f64> = [0.0, 0.4, 1.0]
            .iter()
            .map(|&xi| {
                let cfg = RefineConfig { xi, seed, ..RefineConfig::default() };
                let mut den = [GaussianPriorDenoiser::scalar(v, sched.clone()).unwrap()];
                refine(&scene.mixture, &scene.pseudo, &mut den, &cfg, &sched).unwrap().final_residual
            })
            .collect();
        if res.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        residuals.push(format!("{:.3e}/{:.3e}/{:.3e}", res[0], res[1], res[2]));
    }

    let mut wins = 0;
    let mut exact = true;
    for i in 0..20u64 {
        let seed = 950 + i;
        let scene = make_scene(&SceneSpec { seed, duration_s: 0.5, ..SceneSpec::default() }).unwrap();
        let v = prior_variance(&scene.pseudo);
        let cfg = RefineConfig { alpha: 0.5, seed, ..RefineConfig::default() };
        let mut den = [GaussianPriorDenoiser::scalar(v, sched.clone()).unwrap()];
        let r = refine(&scene.mixture, &scene.pseudo, &mut den, &cfg, &sched).unwrap();
        // alpha only enters after sampling, so the other settings are
        // interpolations of the same run
        let mixed = interpolate(&scene.pseudo[0], &r.aligned[0], 0.5).unwrap();
        exact &= mixed == r.refined[0];
        let reference = scene.clean_waveform(0).unwrap();
        let score = |s: &Spectrogram| si_sdr(&synthesize(s, scene.n_samples).unwrap(), &reference).unwrap();
        let (half, gen, disc) = (score(&r.refined[0]), score(&r.aligned[0]), score(&scene.pseudo[0]));
        if half >= gen.min(disc) {
            wins += 1;
        }
    }
    let pass = monotone == seeds.len() && exact && wins >= 16;
    Outcome::new(
        pass,
        format!(
            "final residual non-increasing over xi 0/0.4/1.0 on {monotone}/{} scenes [{}]; alpha=0.5 >= min(alpha=0, alpha=1) on {wins}/20 seeds (need 16)",
            seeds.len(),
            residuals.join(", ")
        ),
    )
}

fn bin(name: &str) -> PathBuf {
    match name {
        "uadps" => PathBuf::from(env!("CARGO_BIN_EXE_uadps")),
        _ => PathBuf::from(env!("CARGO_BIN_EXE_denoiser-loopback")),
    }
}

fn run_cli(args: &[String]) -> Result<(), String> {
    let out = Command::new(bin("uadps")).args(args).env_remove("UADPS_SEED").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("uadps {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn list(dir: &Path, stem: &str, n: usize) -> String {
    (0..n).map(|k| dir.join(format!("{stem}_{k}.wav")).display().to_string()).collect::<Vec<_>>().join(",")
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for (n_sources, seed) in [(1usize, ENHANCE_SEED0), (2, SEPARATE_SEED0)] {
        let scene_dirs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("scene_{seed}_{i}"))).collect();
        for d in &scene_dirs {
            let args = ["simulate", "--out-dir", &d.display().to_string(), "--seed", &seed.to_string(), "--sources", &n_sources.to_string()];
            if let Err(e) = run_cli(&args.map(String::from)) {
                return Outcome::new(false, e);
            }
        }
        for name in std::iter::once("mixture.wav".to_string()).chain((0..n_sources).flat_map(|k| [format!("clean_{k}.wav"), format!("pseudo_{k}.wav")])) {
            if std::fs::read(scene_dirs[0].join(&name)).unwrap() != std::fs::read(scene_dirs[1].join(&name)).unwrap() {
                return Outcome::new(false, format!("simulate seed {seed}: {name} differs between runs"));
            }
            compared += 1;
        }
        let d = &scene_dirs[0];
        let mut outs = Vec::new();
        for (run, jobs) in [1, 1, 3].iter().enumerate() {
            let out = tmp.path().join(format!("out_{seed}_{run}"));
            let args = vec![
                "refine".to_string(),
                "--mixture".into(),
                d.join("mixture.wav").display().to_string(),
                "--estimates".into(),
                list(d, "pseudo", n_sources),
                "--denoiser".into(),
                format!("oracle:{}", list(d, "clean", n_sources)),
                "--seed".into(),
                seed.to_string(),
                "--jobs".into(),
                jobs.to_string(),
                "--out-dir".into(),
                out.display().to_string(),
            ];
            if let Err(e) = run_cli(&args) {
                return Outcome::new(false, e);
            }
            outs.push(out);
        }
        for k in 0..n_sources {
            let name = format!("refined_{k}.wav");
            let first = std::fs::read(outs[0].join(&name)).unwrap();
            for (run, o) in outs.iter().enumerate().skip(1) {
                if std::fs::read(o.join(&name)).unwrap() != first {
                    return Outcome::new(false, format!("seed {seed}: {name} of run {run} differs"));
                }
                compared += 1;
            }
        }
    }
    Outcome::new(
        true,
        format!("{compared} WAV comparisons byte-identical (simulate twice; refine --jobs 1, 1, 3 on the first K=1 and K=2 end-to-end scenes)"),
    )
}

fn finite_f32(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = f32::from_bits(rng.random::<u32>());
        if v.is_finite() {
            return f64::from(v);
        }
    }
}

fn external_denoiser_protocol() -> Outcome {
    let loopback = bin("loopback").display().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut den = ExternalDenoiser::spawn(&loopback).unwrap();
    let mut mismatches = 0;
    for i in 0..1000u32 {
        let (f, l) = (rng.random_range(1..=40), rng.random_range(1..=40));
        // the wire format is f32: any finite f32 bit pattern must survive
        let data = Array2::from_shape_simple_fn((f, l), || Z::new(finite_f32(&mut rng), finite_f32(&mut rng)));
        let back = den.exchange(i, &data).unwrap();
        let same = back.dim() == data.dim() && back.iter().zip(&data).all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    drop(den);

    let data = Array2::from_elem((4, 6), Z::new(0.5, -0.25));
    let mut bad = Vec::new();
    let mut slowest = Duration::ZERO;
    let modes = ["bad-magic", "bad-version", "bad-dims", "truncated", "garbage", "exit", "hang", "bad-dims@3", "garbage@2"];
    for mode in modes {
        let mut den = ExternalDenoiser::spawn(&format!("{loopback} {mode}")).unwrap();
        let start = Instant::now();
        let mut result = Ok(());
        for t in 1..=3 {
            if let Err(e) = den.exchange(t, &data) {
                result = Err(e);
                break;
            }
        }
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        match result {
            Err(Error::DenoiserProtocol(_)) if elapsed < DEFAULT_TIMEOUT + TIMEOUT_SLACK => {}
            Err(e) => bad.push(format!("{mode}: {e} after {:.1} s", elapsed.as_secs_f64())),
            Ok(()) => bad.push(format!("{mode}: no error")),
        }
    }
    let pass = mismatches == 0 && bad.is_empty();
    let mut detail = format!(
        "1000 frames, {mismatches} mismatches; {} malformed modes -> protocol error, slowest {:.1} s (timeout {} s)",
        modes.len(),
        slowest.as_secs_f64(),
        DEFAULT_TIMEOUT.as_secs()
    );
    if !bad.is_empty() {
        detail = format!("{detail}; {}", bad.join("; "));
    }
    Outcome::new(pass, detail)
}
