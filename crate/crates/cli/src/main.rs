mod commands;
mod config;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Diffusion posterior sampling refinement for multichannel speech
/// enhancement and separation.
#[derive(Debug, Parser)]
#[command(name = "uadps", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine discriminative estimates of the sources in a multichannel mixture.
    Refine(RefineArgs),
    /// Generate a synthetic scene and write it as WAV files plus a manifest.
    Simulate(SimulateArgs),
    /// SI-SDR of estimates against references.
    Evaluate(EvaluateArgs),
    /// Compare the likelihood score against finite differences on generated scenes.
    CheckGrad(CheckGradArgs),
    /// Grid over guidance scale, starting step and interpolation weight.
    Sweep(SweepArgs),
}

/// Settings shared by every subcommand that runs the pipeline.
#[derive(Debug, Args)]
pub struct Knobs {
    /// key=value file applied on top of the defaults and below the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub t_start: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub n_taps: Option<usize>,
    #[arg(long)]
    pub align_taps: Option<usize>,
    /// Experimental step skipping in the reverse chain.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Master seed; defaults to $UADPS_SEED, else 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// oracle:<wav>[,<wav>...] | gaussian:<variance> | extern:<command>
    #[arg(long)]
    pub denoiser: Option<String>,
    /// detached | vjp
    #[arg(long)]
    pub grad_mode: Option<String>,
    /// Differentiate the likelihood through the filter estimate as well.
    #[arg(long)]
    pub differentiate_fcp: bool,
    #[arg(long)]
    pub fft_size: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub sources: Option<usize>,
    /// Length of the true transfer functions in frames.
    #[arg(long)]
    pub atf_taps: Option<usize>,
    /// white:<variance> | diffuse:<rate> | fixed-scm:<re,im,...>
    #[arg(long)]
    pub noise: Option<String>,
    /// Use `inf` for a noiseless scene.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    pub pseudo_sisdr_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LengthArgs {
    /// Zero-pad shorter files to the longest one.
    #[arg(long, conflicts_with = "trim")]
    pub pad: bool,
    /// Cut longer files to the shortest one.
    #[arg(long)]
    pub trim: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Multichannel mixture WAV (at least two channels).
    #[arg(long)]
    pub mixture: PathBuf,
    /// Single-channel estimate WAVs, one per source.
    #[arg(long, value_delimiter = ',', required = true)]
    pub estimates: Vec<PathBuf>,
    /// Clean references for reporting SI-SDR.
    #[arg(long, value_delimiter = ',')]
    pub reference: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub length: LengthArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub estimates: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub reference: Vec<PathBuf>,
    /// Match estimates to references by the best permutation.
    #[arg(long)]
    pub permute: bool,
    /// Also print one key=value record per line.
    #[arg(long)]
    pub records: bool,
    #[command(flatten)]
    pub length: LengthArgs,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Number of generated scenes (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    /// Diffusion step at which the score is checked.
    #[arg(long, default_value_t = 300)]
    pub step: usize,
    /// Pass iff the worst relative error is below this.
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub mixture: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub estimates: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub reference: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2])]
    pub xi_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 300, 400, 500])]
    pub t_start_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0])]
    pub alpha_grid: Vec<f64>,
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub length: LengthArgs,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CHECK: u8 = 1;
    pub const IO: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const PROTOCOL: u8 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: Self::IO, message: message.into() }
    }
}

impl From<uadps::Error> for Failure {
    fn from(e: uadps::Error) -> Self {
        use uadps::Error as E;
        let code = match &e {
            E::Io(_) | E::Wav(_) => Self::IO,
            E::DenoiserProtocol(_) => Self::PROTOCOL,
            E::InvalidInput(_) | E::Capability(_) | E::DegenerateWeights => Self::CONFIG,
            _ => Self::CHECK,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => Failure::CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("uadps: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
