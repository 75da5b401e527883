use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("generator {gamma} is not admissible for r_p = {r_p}, q = {q}")]
    InadmissibleGenerator { gamma: u64, r_p: usize, q: usize },

    #[error(
        "no admissible generator exists for r_p = {r_p}, q = {q}: the powers of every \
         candidate modulo {modulus} repeat within {q} terms; choose a different r_p \
         (r_p + 1 prime is always admissible for q <= r_p)",
        modulus = r_p + 1
    )]
    NoAdmissibleGenerator { r_p: usize, q: usize },

    #[error("design coordinate {value} outside [0, 1]")]
    CoordinateOutOfRange { value: f64 },

    #[error("arm W = {arm} has no observations")]
    EmptyArm { arm: u8 },

    #[error("arm W = {arm} has {size} observations, need at least {needed}")]
    ArmTooSmall { arm: u8, size: usize, needed: usize },

    #[error("propensity {0} outside (0, 1)")]
    PropensityOutOfRange(f64),

    #[error("zero sample standard deviation")]
    ZeroVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the data not supporting the requested
    /// statistical procedure (too few units in an arm, zero variance, ...).
    pub fn is_statistical(&self) -> bool {
        matches!(
            self,
            Error::TooFewRows { .. }
                | Error::EmptyArm { .. }
                | Error::ArmTooSmall { .. }
                | Error::NoAdmissibleGenerator { .. }
                | Error::PropensityOutOfRange(_)
                | Error::ZeroVariance
        )
    }

    /// True for malformed input or arguments.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::InvalidArgument(_)
                | Error::DimensionMismatch { .. }
                | Error::NonFinite(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::InadmissibleGenerator { .. }
                | Error::CoordinateOutOfRange { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
