use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty reduction: {0}")]
    EmptyReduction(String),

    /// Total conflict between two mass assignments at a voxel; carries the
    /// voxel coordinates where 1 - delta dropped below the guard.
    #[error("total conflict between mass assignments at voxel ({x}, {y}, {z})")]
    Conflict { x: usize, y: usize, z: usize },

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("metric undefined for class {class}: {reason}")]
    UndefinedMetric { class: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
