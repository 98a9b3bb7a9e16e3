//! Error taxonomy.  Variants map onto process exit codes in the CLI:
//! model/validation problems → 2, cap refusals → 3, failed assumption
//! probes → 4, everything else → 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent model description.
    #[error("model: {0}")]
    Model(String),

    /// An enumeration or table would exceed the configured cap.  The message
    /// names the offending space and both numbers so callers can decide
    /// whether raising the cap is sane.
    #[error("cap exceeded: {space} needs {value} items (cap {cap}); raise --cap or DEEPTEAM_CAP to proceed")]
    CapExceeded {
        space: String,
        value: u128,
        cap: u64,
    },

    /// A numerical assumption probe failed (decoupling of observed
    /// sub-populations, discounted contraction margin, ...).
    #[error("assumption check failed: {0}")]
    Assumption(String),

    /// Bad arguments, unknown symbols, missing capabilities of a model
    /// (e.g. no functional dynamics where one is required).
    #[error("{0}")]
    Invalid(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Model(_) => 2,
            Error::CapExceeded { .. } => 3,
            Error::Assumption(_) => 4,
            _ => 1,
        }
    }
}
