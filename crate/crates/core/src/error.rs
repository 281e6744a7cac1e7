use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),
    #[error("layer is not eligible for winograd F(2x2,3x3): {0}")]
    IneligibleSpec(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("accuracy goal {goal:.4} unreachable: fully protected accuracy is {achieved:.4}")]
    GoalUnreachable { goal: f64, achieved: f64 },
    #[error("voltage {voltage} V outside curve range [{min}, {max}]")]
    VoltageOutOfRange { voltage: f64, min: f64, max: f64 },
    #[error("loss budget {budget} infeasible even at {voltage} V (accuracy {accuracy:.4})")]
    InfeasibleBudget {
        budget: f64,
        voltage: f64,
        accuracy: f64,
    },
    #[error("division by zero: {0}")]
    DivisionByZero(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
