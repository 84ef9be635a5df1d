use std::io;

/// Errors raised across the pipeline.
///
/// The variants mirror the failure classes callers need to tell apart: bad
/// arguments, degenerate segmentations, missing cycle landmarks, model shape
/// mismatches and unusable data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate segmentation: {0}")]
    Degenerate(String),
    #[error("cannot locate cycle landmarks: {0}")]
    Landmark(String),
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
