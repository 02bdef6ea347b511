use privrec_core::catalog::CatalogError;
use privrec_core::evaluation::EvalError;
use privrec_core::pipeline::PipelineError;
use privrec_core::retrieval::RetrievalError;
use privrec_core::sensitivity::SensitivityError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_UNREACHABLE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Unreachable(_) => EXIT_UNREACHABLE,
            Self::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::Config(m) => Self::Config(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        match e {
            SensitivityError::InvalidParam(m) => Self::Config(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Transport(m) => Self::Unreachable(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => Self::Config(m),
            PipelineError::Backend(b) => Self::Config(b.to_string()),
            PipelineError::Scorer(s) => s.into(),
            PipelineError::Retrieval(r) => r.into(),
            PipelineError::BackendUnreachable { failed, total, .. } => {
                Self::Unreachable(format!("all {failed} of {total} users failed with transport errors"))
            }
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Failed(e.to_string())
    }
}
