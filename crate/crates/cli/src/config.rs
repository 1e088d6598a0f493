//! Layered settings: built-in defaults, then a `key=value` file, then flags.

use std::fmt::Write as _;
use std::path::Path;

use uadps::guidance::GradMode;
use uadps::harness::{parse_key_values, SceneSpec};
use uadps::pipeline::RefineConfig;
use uadps::spectral::StftParams;

use crate::Failure;

pub const SEED_ENV: &str = "UADPS_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub refine: RefineConfig,
    pub scene: SceneSpec,
    pub denoiser: Option<String>,
    pub jobs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self { refine: RefineConfig::default(), scene: SceneSpec::default(), denoiser: None, jobs: 1 }
    }
}

fn grad_mode_name(m: GradMode) -> &'static str {
    match m {
        GradMode::Detached => "detached",
        GradMode::FullVjp => "vjp",
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, origin: &str) -> Result<T, Failure> {
    value
        .trim()
        .parse()
        .map_err(|_| Failure::config(format!("{origin}: invalid value `{value}` for `{key}`")))
}

impl Settings {
    /// Built-in defaults, with the seed taken from `UADPS_SEED` when set.
    pub fn with_env_seed() -> Result<Self, Failure> {
        let mut s = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            s.set("seed", &v, SEED_ENV)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), Failure> {
        let r = &mut self.refine;
        let sc = &mut self.scene;
        match key {
            "t_start" => r.t_start = parse(key, value, origin)?,
            "xi" => r.xi = parse(key, value, origin)?,
            "alpha" => r.alpha = parse(key, value, origin)?,
            "eta" => r.eta = parse(key, value, origin)?,
            "gamma" => r.fcp.gamma = parse(key, value, origin)?,
            "n_taps" => r.fcp.n_taps = parse(key, value, origin)?,
            "align_taps" => r.align_taps = parse(key, value, origin)?,
            "stride" => r.stride = parse(key, value, origin)?,
            "differentiate_through_fcp" => r.differentiate_through_fcp = parse(key, value, origin)?,
            "seed" => {
                r.seed = parse(key, value, origin)?;
                sc.seed = r.seed;
            }
            "grad_mode" => {
                r.grad_mode = match value.trim() {
                    "detached" => GradMode::Detached,
                    "vjp" => GradMode::FullVjp,
                    other => return Err(Failure::config(format!("{origin}: grad_mode must be detached or vjp, got `{other}`"))),
                }
            }
            "fft_size" => sc.fft_size = parse(key, value, origin)?,
            "hop" => sc.hop = parse(key, value, origin)?,
            "sample_rate" => sc.sample_rate = parse(key, value, origin)?,
            "denoiser" => self.denoiser = Some(value.trim().to_string()),
            "jobs" => self.jobs = parse(key, value, origin)?,
            "channels" => sc.n_channels = parse(key, value, origin)?,
            "sources" => sc.n_sources = parse(key, value, origin)?,
            "atf_taps" => sc.n_taps = parse(key, value, origin)?,
            "noise" => sc.noise = value.trim().parse().map_err(|e| Failure::config(format!("{origin}: {e}")))?,
            "snr_db" => sc.snr_db = parse(key, value, origin)?,
            "duration_s" => sc.duration_s = parse(key, value, origin)?,
            "pseudo_sisdr_db" => sc.pseudo_sisdr_db = parse(key, value, origin)?,
            _ => return Err(Failure::config(format!("{origin}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        let origin = path.display().to_string();
        let kv = parse_key_values(&text).map_err(|e| Failure::config(format!("{origin}: {e}")))?;
        for (k, v) in kv {
            self.set(&k, &v, &origin)?;
        }
        Ok(())
    }

    pub fn params(&self) -> StftParams {
        self.scene.params()
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.jobs == 0 {
            return Err(Failure::config("jobs must be at least 1"));
        }
        self.params().validate().map_err(|e| Failure::config(e.to_string()))?;
        self.refine.validate(&uadps::diffusion::Schedule::default()).map_err(|e| Failure::config(e.to_string()))
    }

    /// Every key with its resolved value, loadable again with `--config`.
    pub fn render(&self) -> String {
        let r = &self.refine;
        let sc = &self.scene;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("seed", r.seed.to_string());
        line("t_start", r.t_start.to_string());
        line("xi", r.xi.to_string());
        line("alpha", r.alpha.to_string());
        line("eta", r.eta.to_string());
        line("gamma", r.fcp.gamma.to_string());
        line("n_taps", r.fcp.n_taps.to_string());
        line("align_taps", r.align_taps.to_string());
        line("stride", r.stride.to_string());
        line("grad_mode", grad_mode_name(r.grad_mode).to_string());
        line("differentiate_through_fcp", r.differentiate_through_fcp.to_string());
        line("fft_size", sc.fft_size.to_string());
        line("hop", sc.hop.to_string());
        line("sample_rate", sc.sample_rate.to_string());
        if let Some(d) = &self.denoiser {
            line("denoiser", d.clone());
        }
        line("jobs", self.jobs.to_string());
        line("channels", sc.n_channels.to_string());
        line("sources", sc.n_sources.to_string());
        line("atf_taps", sc.n_taps.to_string());
        line("noise", sc.noise.to_string());
        line("snr_db", sc.snr_db.to_string());
        line("duration_s", sc.duration_s.to_string());
        line("pseudo_sisdr_db", sc.pseudo_sisdr_db.to_string());
        out
    }
}
