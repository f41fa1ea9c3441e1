//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NvError {
    /// Input data violates an integrity requirement (non-finite voxels,
    /// out-of-range mask values, ...).
    #[error("data integrity: {0}")]
    Data(String),

    /// Shapes or spacings of paired grids do not line up.
    #[error("alignment: {0}")]
    Alignment(String),

    /// A caller-supplied configuration is invalid.
    #[error("config: {0}")]
    Config(String),

    /// An operation contract was violated (wrong patch shape, bad range, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// Stitching input does not cover the target grid.
    #[error("coverage: {0}")]
    Coverage(String),

    /// A file failed to parse; `field` names the offending header field.
    #[error("parse error in field `{field}`: {msg}")]
    Parse { field: String, msg: String },

    /// Training produced a non-finite loss. The caller gets the last
    /// finite-loss weights back through the training report.
    #[error("training diverged at step {step}: loss became non-finite")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NvError {
    pub fn parse(field: &str, msg: impl Into<String>) -> Self {
        NvError::Parse {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, NvError>;
