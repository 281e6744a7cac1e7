use thiserror::Error;
use wft_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config file not found: {0}")]
    ConfigNotFound(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// Stable machine-readable code reported in the error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ConfigNotFound(_) => "CONFIG_NOT_FOUND",
            CliError::ConfigParse(_) => "CONFIG_PARSE",
            CliError::ConfigInvalid(_) => "CONFIG_INVALID",
            CliError::Usage(_) => "USAGE",
            CliError::Io(_) => "IO_ERROR",
            CliError::Core(e) => match e {
                CoreError::Io(_) => "IO_ERROR",
                CoreError::BadMagic { .. }
                | CoreError::UnsupportedVersion(_)
                | CoreError::Truncated(_)
                | CoreError::ChecksumMismatch { .. }
                | CoreError::Malformed(_) => "INVALID_FILE",
                CoreError::ShapeMismatch(_)
                | CoreError::InvalidFormat(_)
                | CoreError::IneligibleSpec(_)
                | CoreError::InvalidModel(_) => "INVALID_MODEL",
                CoreError::GoalUnreachable { .. } => "GOAL_UNREACHABLE",
                CoreError::VoltageOutOfRange { .. } | CoreError::InfeasibleBudget { .. } => "INFEASIBLE_BUDGET",
                CoreError::InvalidArgument(_) | CoreError::DivisionByZero(_) => "INVALID_ARGUMENT",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "code": self.code(), "message": self.to_string() }
        })
        .to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
