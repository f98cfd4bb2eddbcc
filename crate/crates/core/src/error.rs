use thiserror::Error;

/// Errors produced by the SPM toolkit.
///
/// Variants are grouped by category so callers (the CLI in particular) can map
/// them onto stable exit codes via [`SpmError::category`].
#[derive(Debug, Error)]
pub enum SpmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("testbed error: {0}")]
    Testbed(String),

    #[error("incompatible membrane `{membrane}`: {report}")]
    Incompatible { membrane: String, report: String },

    #[error("checksum mismatch: manifest says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("destination is locked by another writer: {0}")]
    Locked(String),

    #[error("diffusion timestep {t} out of range 0..={max}")]
    TimestepRange { t: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Degenerate,
    Contract,
    Training,
    Testbed,
    Incompatible,
    Registry,
    Io,
}

impl ErrorCategory {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Degenerate => "degenerate-input",
            ErrorCategory::Contract => "contract",
            ErrorCategory::Training => "training",
            ErrorCategory::Testbed => "testbed",
            ErrorCategory::Incompatible => "incompatible",
            ErrorCategory::Registry => "registry",
            ErrorCategory::Io => "io",
        }
    }
}

impl SpmError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SpmError::Config(_) => ErrorCategory::Config,
            SpmError::Degenerate(_) => ErrorCategory::Degenerate,
            SpmError::Contract(_) | SpmError::TimestepRange { .. } => ErrorCategory::Contract,
            SpmError::Training { .. } => ErrorCategory::Training,
            SpmError::Testbed(_) => ErrorCategory::Testbed,
            SpmError::Incompatible { .. } => ErrorCategory::Incompatible,
            SpmError::Checksum { .. }
            | SpmError::Version { .. }
            | SpmError::Truncated(_)
            | SpmError::Malformed(_)
            | SpmError::Locked(_)
            | SpmError::Json(_) => ErrorCategory::Registry,
            SpmError::Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, SpmError>;
