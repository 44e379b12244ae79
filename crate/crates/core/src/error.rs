use thiserror::Error;

use crate::gridworld::Pose;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cul-de-sac spec: {0}")]
    InvalidSpec(String),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("sensor patch disagrees with known cell ({}, {})", .0.row, .0.col)]
    Inconsistent(Pose),

    #[error("goal is unreachable")]
    Unreachable,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("expert rollout failed on {0}")]
    ExpertFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
