use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use uadps::diffusion::{forward_to_step, Schedule};
use uadps::guidance::{finite_diff_check, Likelihood};
use uadps::harness::{dump_scene, make_scene, permute_match, si_sdr, Matching, MAX_PERMUTE_SOURCES};
use uadps::pipeline::{analyze_inputs, interpolate, prepare_scm, refine, synthesize_outputs, RefineResult};
use uadps::rng::{substream, Purpose};
use uadps::spectral::{compress, Spectrogram, StftParams};
use uadps::wav::{write_wav, Audio, WavFormat};

use crate::config::Settings;
use crate::inputs::{build_denoisers, load_inputs, oracle_targets, read_mono, DenoiserSpec, Inputs, LengthPolicy};
use crate::{CheckGradArgs, Cli, Command, EvaluateArgs, Failure, Knobs, RefineArgs, SceneArgs, SimulateArgs, SweepArgs};

pub fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Refine(a) => {
            let s = resolve(&a.knobs, None)?;
            in_pool(&s, || cmd_refine(&a, &s))
        }
        Command::Simulate(a) => {
            let s = resolve(&a.knobs, Some(&a.scene))?;
            in_pool(&s, || cmd_simulate(&a, &s))
        }
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::CheckGrad(a) => {
            let s = resolve(&a.knobs, Some(&a.scene))?;
            in_pool(&s, || cmd_check_grad(&a, &s))
        }
        Command::Sweep(a) => {
            let s = resolve(&a.knobs, None)?;
            in_pool(&s, || cmd_sweep(&a, &s))
        }
    }
}

fn in_pool(s: &Settings, f: impl FnOnce() -> Result<u8, Failure> + Send) -> Result<u8, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.jobs)
        .build()
        .map_err(|e| Failure::config(format!("cannot start {} worker threads: {e}", s.jobs)))?;
    pool.install(f)
}

fn flag_pairs(k: &Knobs, scene: Option<&SceneArgs>) -> Vec<(&'static str, &'static str, String)> {
    let mut v = Vec::new();
    let mut push = |key, flag, val: Option<String>| {
        if let Some(val) = val {
            v.push((key, flag, val));
        }
    };
    push("xi", "--xi", k.xi.map(|x| x.to_string()));
    push("alpha", "--alpha", k.alpha.map(|x| x.to_string()));
    push("t_start", "--t-start", k.t_start.map(|x| x.to_string()));
    push("eta", "--eta", k.eta.map(|x| x.to_string()));
    push("gamma", "--gamma", k.gamma.map(|x| x.to_string()));
    push("n_taps", "--n-taps", k.n_taps.map(|x| x.to_string()));
    push("align_taps", "--align-taps", k.align_taps.map(|x| x.to_string()));
    push("stride", "--stride", k.stride.map(|x| x.to_string()));
    push("seed", "--seed", k.seed.map(|x| x.to_string()));
    push("denoiser", "--denoiser", k.denoiser.clone());
    push("grad_mode", "--grad-mode", k.grad_mode.clone());
    push("differentiate_through_fcp", "--differentiate-fcp", k.differentiate_fcp.then(|| "true".to_string()));
    push("fft_size", "--fft-size", k.fft_size.map(|x| x.to_string()));
    push("hop", "--hop", k.hop.map(|x| x.to_string()));
    push("jobs", "--jobs", k.jobs.map(|x| x.to_string()));
    if let Some(sc) = scene {
        push("channels", "--channels", sc.channels.map(|x| x.to_string()));
        push("sources", "--sources", sc.sources.map(|x| x.to_string()));
        push("atf_taps", "--atf-taps", sc.atf_taps.map(|x| x.to_string()));
        push("noise", "--noise", sc.noise.clone());
        push("snr_db", "--snr-db", sc.snr_db.map(|x| x.to_string()));
        push("duration_s", "--duration", sc.duration.map(|x| x.to_string()));
        push("sample_rate", "--sample-rate", sc.sample_rate.map(|x| x.to_string()));
        push("pseudo_sisdr_db", "--pseudo-sisdr-db", sc.pseudo_sisdr_db.map(|x| x.to_string()));
    }
    v
}

/// Defaults, then the config file, then flags; prints the result to stderr.
fn resolve(knobs: &Knobs, scene: Option<&SceneArgs>) -> Result<Settings, Failure> {
    let mut s = Settings::with_env_seed()?;
    if let Some(path) = &knobs.config {
        s.load_file(path)?;
    }
    for (key, flag, value) in flag_pairs(knobs, scene) {
        s.set(key, &value, flag)?;
    }
    s.validate()?;
    eprint!("# resolved configuration\n{}", s.render());
    Ok(s)
}

fn denoiser_spec(s: &Settings) -> Result<DenoiserSpec, Failure> {
    let d = s.denoiser.as_deref().ok_or_else(|| Failure::config("--denoiser is required (oracle:<wav>, gaussian:<variance> or extern:<command>)"))?;
    DenoiserSpec::parse(d)
}

fn write_mono(path: &Path, sample_rate: u32, samples: Vec<f64>) -> Result<(), Failure> {
    Ok(write_wav(path, &Audio::mono(sample_rate, samples), WavFormat::Float32)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn stft_params(s: &Settings, sample_rate: u32) -> StftParams {
    StftParams::new(s.scene.fft_size, s.scene.hop, sample_rate)
}

fn oracle_for(spec: &DenoiserSpec, inputs: &Inputs, params: &StftParams) -> Result<Vec<Spectrogram>, Failure> {
    match spec {
        DenoiserSpec::Oracle(paths) if paths.is_empty() => {
            Err(Failure::config("--denoiser: oracle needs clean WAV files here (oracle:<wav>[,<wav>...])"))
        }
        DenoiserSpec::Oracle(paths) => oracle_targets(paths, inputs.n_samples, inputs.sample_rate, params),
        _ => Ok(Vec::new()),
    }
}

fn matching(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<Matching, Failure> {
    Ok(permute_match(estimates, references)?)
}

fn cmd_refine(a: &RefineArgs, s: &Settings) -> Result<u8, Failure> {
    let spec = denoiser_spec(s)?;
    let inputs = load_inputs(&a.mixture, &a.estimates, &a.reference, LengthPolicy::from(&a.length))?;
    let params = stft_params(s, inputs.sample_rate);
    let analyzed = analyze_inputs(&inputs.mixture, &inputs.estimates, &params)?;
    let sched = Schedule::default();
    let oracle = oracle_for(&spec, &inputs, &params)?;
    let mut denoisers = build_denoisers(&spec, inputs.estimates.len(), &oracle, &sched)?;
    let result = refine(&analyzed.mixture, &analyzed.estimates, &mut denoisers, &s.refine, &sched)?;
    let outputs = synthesize_outputs(&result.refined, &analyzed.estimate_dc, analyzed.n_samples)?;

    create_dir(&a.out_dir)?;
    let mut report = String::new();
    let _ = write!(report, "# resolved configuration\n{}", s.render());
    for r in &result.reports {
        let norms: Vec<String> = r.grad_norms.iter().enumerate().map(|(k, g)| format!("grad_norm_{k}={g:e}")).collect();
        let _ = writeln!(report, "step={} quadratic={:e} {} fcp_failures={}", r.t, r.quadratic_value, norms.join(" "), r.fcp_solve_failures);
    }
    let mut summary = vec![
        format!("scm_fcp_failures={}", result.scm.fcp_failures),
        format!("final_residual={:e}", result.final_residual),
    ];
    if !inputs.references.is_empty() {
        let before = matching(&inputs.estimates, &inputs.references)?;
        let after = matching(&outputs, &inputs.references)?;
        for (k, (b, o)) in before.si_sdr.iter().zip(&after.si_sdr).enumerate() {
            summary.push(format!("source={k} input_sisdr={b:.3} output_sisdr={o:.3}"));
        }
        summary.push(format!("input_sisdr_mean={:.3} output_sisdr_mean={:.3}", before.mean, after.mean));
    }
    for (k, samples) in outputs.into_iter().enumerate() {
        let path = a.out_dir.join(format!("refined_{k}.wav"));
        write_mono(&path, inputs.sample_rate, samples)?;
        summary.push(format!("wrote={}", path.display()));
    }
    for line in &summary {
        println!("{line}");
        let _ = writeln!(report, "{line}");
    }
    let report_path = a.out_dir.join("report.txt");
    fs::write(&report_path, report).map_err(|e| Failure::io(format!("{}: {e}", report_path.display())))?;
    Ok(0)
}

fn cmd_simulate(a: &SimulateArgs, s: &Settings) -> Result<u8, Failure> {
    let scene = make_scene(&s.scene)?;
    dump_scene(&scene, &a.out_dir)?;
    println!("wrote={} sources={} channels={} samples={}", a.out_dir.display(), s.scene.n_sources, s.scene.n_channels, scene.n_samples);
    Ok(0)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<u8, Failure> {
    if a.estimates.len() != a.reference.len() {
        return Err(Failure::config(format!("--estimates lists {} files but --reference lists {}", a.estimates.len(), a.reference.len())));
    }
    if a.permute && a.estimates.len() > MAX_PERMUTE_SOURCES {
        return Err(Failure::config(format!("--permute supports at most {MAX_PERMUTE_SOURCES} sources")));
    }
    let mut est = Vec::new();
    let mut refs = Vec::new();
    for p in &a.estimates {
        est.push(read_mono(p)?);
    }
    for p in &a.reference {
        refs.push(read_mono(p)?);
    }
    let rate = refs[0].0;
    for (p, (r, _)) in a.estimates.iter().chain(&a.reference).zip(est.iter().chain(&refs)) {
        if *r != rate {
            return Err(Failure::config(format!("{}: sample rate {r} Hz differs from {rate} Hz", p.display())));
        }
    }
    let mut est: Vec<Vec<f64>> = est.into_iter().map(|(_, s)| s).collect();
    let mut refs: Vec<Vec<f64>> = refs.into_iter().map(|(_, s)| s).collect();
    {
        let mut all: Vec<(&Path, &mut Vec<f64>)> = Vec::new();
        for (p, s) in a.estimates.iter().zip(est.iter_mut()) {
            all.push((p, s));
        }
        for (p, s) in a.reference.iter().zip(refs.iter_mut()) {
            all.push((p, s));
        }
        crate::inputs::fit_lengths(&mut all, LengthPolicy::from(&a.length))?;
    }
    let (perm, scores): (Vec<usize>, Vec<f64>) = if a.permute {
        let m = matching(&est, &refs)?;
        (m.perm, m.si_sdr)
    } else {
        let scores = est.iter().zip(&refs).map(|(e, r)| si_sdr(e, r)).collect::<Result<Vec<_>, _>>()?;
        ((0..est.len()).collect(), scores)
    };
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let width = a.estimates.iter().map(|p| p.display().to_string().len()).max().unwrap_or(8).max(8);
    println!("{:<6}  {:<width$}  {:>10}", "source", "estimate", "si_sdr_db");
    for (i, score) in scores.iter().enumerate() {
        println!("{:<6}  {:<width$}  {:>10.2}", i, a.estimates[perm[i]].display(), score);
    }
    println!("{:<6}  {:<width$}  {:>10.2}", "mean", "", mean);
    if a.records {
        for (i, score) in scores.iter().enumerate() {
            println!("source={i} estimate={} reference={} si_sdr_db={score}", a.estimates[perm[i]].display(), a.reference[i].display());
        }
        println!("mean_si_sdr_db={mean}");
    }
    Ok(0)
}

fn cmd_check_grad(a: &CheckGradArgs, s: &Settings) -> Result<u8, Failure> {
    if a.scenes == 0 || a.probes == 0 {
        return Err(Failure::config("--scenes and --probes must be positive"));
    }
    let spec = match &s.denoiser {
        Some(d) => DenoiserSpec::parse(d)?,
        None => DenoiserSpec::Oracle(Vec::new()),
    };
    if matches!(&spec, DenoiserSpec::Oracle(p) if !p.is_empty()) {
        return Err(Failure::config("--denoiser: check-grad uses the generated scene's sources; pass plain `oracle`"));
    }
    let sched = Schedule::default();
    if a.step == 0 || a.step > sched.n_steps() {
        return Err(Failure::config(format!("--step must lie in 1..={}", sched.n_steps())));
    }
    let cfg = s.refine.guidance();
    let mut worst = 0.0f64;
    for i in 0..a.scenes {
        let seed = s.scene.seed.wrapping_add(i as u64);
        let scene = make_scene(&uadps::harness::SceneSpec { seed, ..s.scene.clone() })?;
        let oracle: Vec<Spectrogram> = scene.clean.iter().map(compress).collect();
        let mut denoisers = build_denoisers(&spec, scene.clean.len(), &oracle, &sched)?;
        let xbar = scene
            .pseudo
            .iter()
            .enumerate()
            .map(|(k, x)| forward_to_step(&compress(x), a.step, &sched, &mut substream(seed, Purpose::ForwardInit, k, 0)))
            .collect::<Result<Vec<_>, _>>()?;
        let prep = prepare_scm(&scene.mixture, &scene.pseudo, &s.refine.fcp, s.refine.eta)?;
        let model = Likelihood::new(&scene.mixture, &prep.inverse, s.refine.fcp)?;
        let report = finite_diff_check(&xbar, &mut denoisers, &model, &sched, a.step, &cfg, a.probes, a.h, seed)?;
        println!("scene={i} seed={seed} probes={} skipped={} max_rel_error={:e}", a.probes, report.skipped, report.max_rel_error);
        worst = worst.max(report.max_rel_error);
    }
    let pass = worst < a.threshold;
    println!("max_rel_error={worst:e} threshold={:e} result={}", a.threshold, if pass { "pass" } else { "fail" });
    Ok(if pass { 0 } else { Failure::CHECK })
}

struct Cell {
    xi: f64,
    t_start: usize,
}

fn cmd_sweep(a: &SweepArgs, s: &Settings) -> Result<u8, Failure> {
    let spec = denoiser_spec(s)?;
    if a.alpha_grid.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Failure::config("--alpha-grid values must lie in [0, 1]"));
    }
    let inputs = load_inputs(&a.mixture, &a.estimates, &a.reference, LengthPolicy::from(&a.length))?;
    let params = stft_params(s, inputs.sample_rate);
    let analyzed = analyze_inputs(&inputs.mixture, &inputs.estimates, &params)?;
    let oracle = oracle_for(&spec, &inputs, &params)?;
    let sched = Schedule::default();
    let baseline = matching(&inputs.estimates, &inputs.references)?.mean;

    let cells: Vec<Cell> = a.xi_grid.iter().flat_map(|&xi| a.t_start_grid.iter().map(move |&t_start| Cell { xi, t_start })).collect();
    for c in &cells {
        let cfg = uadps::pipeline::RefineConfig { xi: c.xi, t_start: c.t_start, ..s.refine };
        cfg.validate(&sched).map_err(|e| Failure::config(format!("grid cell xi={} t_start={}: {e}", c.xi, c.t_start)))?;
    }
    let rows: Vec<Result<Vec<String>, Failure>> = cells
        .par_iter()
        .map(|c| {
            let cfg = uadps::pipeline::RefineConfig { xi: c.xi, t_start: c.t_start, ..s.refine };
            let mut denoisers = build_denoisers(&spec, analyzed.estimates.len(), &oracle, &sched)?;
            let result: RefineResult = refine(&analyzed.mixture, &analyzed.estimates, &mut denoisers, &cfg, &sched)?;
            let mut lines = Vec::with_capacity(a.alpha_grid.len());
            for &alpha in &a.alpha_grid {
                let mixed = analyzed
                    .estimates
                    .iter()
                    .zip(&result.aligned)
                    .map(|(x, al)| interpolate(x, al, alpha))
                    .collect::<Result<Vec<_>, _>>()?;
                let wave = synthesize_outputs(&mixed, &analyzed.estimate_dc, analyzed.n_samples)?;
                let m = matching(&wave, &inputs.references)?;
                let per: Vec<String> = m.si_sdr.iter().enumerate().map(|(k, v)| format!("sisdr_{k}={v:.4}")).collect();
                lines.push(format!(
                    "xi={} t_start={} alpha={} mean_sisdr={:.4} input_sisdr={:.4} {} final_residual={:e}",
                    c.xi,
                    c.t_start,
                    alpha,
                    m.mean,
                    baseline,
                    per.join(" "),
                    result.final_residual
                ));
            }
            Ok(lines)
        })
        .collect();
    for row in rows {
        for line in row? {
            println!("{line}");
        }
    }
    Ok(0)
}
