use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// FCP weights are identically zero (silent target with `gamma == 0`).
    #[error("degenerate FCP weights: target is silent and gamma is zero")]
    DegenerateWeights,

    #[error("normal equations not solvable at frequency {freq}, channel {channel}")]
    SolveFailure { freq: usize, channel: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("denoiser protocol error: {0}")]
    DenoiserProtocol(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    /// Malformed or unsupported WAV file.
    #[error("wav: {0}")]
    Wav(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
