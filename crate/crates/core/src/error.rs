use std::path::PathBuf;

use thiserror::Error;

use crate::domain::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scenario failed validation:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("calendar component out of range: {0}")]
    Calendar(String),

    #[error("market series does not cover index {index} (length {len})")]
    Coverage { index: i64, len: usize },

    #[error("episode already finished at t = {0}")]
    EpisodeFinished(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward called without a cached forward pass")]
    NoForwardCache,

    #[error("replay buffer holds {size} transitions, batch needs {batch}")]
    InsufficientBuffer { size: usize, batch: usize },

    #[error("search guard exceeded: {0}")]
    Guard(String),

    #[error("series file {path}: {msg}")]
    Series { path: PathBuf, msg: String },

    #[error("archive: {0}")]
    Archive(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scenario file: {0}")]
    ScenarioFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  - {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}
