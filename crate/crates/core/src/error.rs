use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value `{value}` is not in concept space `{space}`")]
    UnknownValue { space: String, value: String },
    #[error("invalid concept space: {0}")]
    InvalidSpace(String),
    #[error("concept spaces overlap: {0}")]
    OverlappingSpaces(String),
    #[error("concept spaces do not match: {0}")]
    SpaceMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("unknown prompt `{name}` (available: {})", available.join(", "))]
    UnknownPrompt { name: String, available: Vec<String> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid edit plan: {0}")]
    InvalidPlan(String),
    #[error("configuration has {} problem(s): {}", .0.len(), .0.join("; "))]
    Config(Vec<String>),
    #[error("chain {chain} aborted at t={t}: {reason}")]
    ChainAborted { chain: usize, t: usize, reason: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures of a score oracle. Remote transport problems are kept apart from
/// request problems so callers can retry or reconnect selectively.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("timestep {t} outside 0..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("remote oracle timed out")]
    Timeout,
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("remote error {code}: {msg}")]
    Remote { code: String, msg: String },
}

impl OracleError {
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            OracleError::Timeout | OracleError::Transport(_) | OracleError::MalformedFrame(_)
        )
    }
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownValue { .. } => "unknown_value",
            Error::InvalidSpace(_) => "invalid_space",
            Error::OverlappingSpaces(_) => "overlapping_spaces",
            Error::SpaceMismatch(_) => "space_mismatch",
            Error::InvalidWeights(_) => "invalid_weights",
            Error::UnknownPrompt { .. } => "unknown_prompt",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidWorld(_) => "invalid_world",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Config(_) => "config",
            Error::ChainAborted { .. } => "chain_aborted",
            Error::Oracle(e) if e.is_transport() => "oracle_transport",
            Error::Oracle(_) => "oracle",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Individual problems; a configuration error lists each violation.
    pub fn problems(&self) -> Vec<String> {
        match self {
            Error::Config(p) => p.clone(),
            other => vec![other.to_string()],
        }
    }
}
