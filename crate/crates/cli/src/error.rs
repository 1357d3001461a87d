use chainplan::denoiser::DenoiserError;
use chainplan::sampler::SamplerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
}

impl CliError {
    /// Process exit status: 1 config or input problem, 2 numerical failure,
    /// 3 failed acceptance check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io(_) => 1,
            Self::Numerical(_) => 2,
            Self::Acceptance(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DenoiserError> for CliError {
    fn from(e: DenoiserError) -> Self {
        match e {
            DenoiserError::NonFinite { .. } => Self::Numerical(e.to_string()),
            DenoiserError::Io { .. } | DenoiserError::Format(_) => Self::Io(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::NonFinite { .. } => Self::Numerical(e.to_string()),
            SamplerError::Denoiser(d) => d.into(),
            _ => Self::Config(e.to_string()),
        }
    }
}
