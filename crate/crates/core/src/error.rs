use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state off grid: ({0}, {1})")]
    StateOffGrid(i32, i32),
    #[error("invalid action id {0}")]
    InvalidAction(u8),
    #[error("negative budget {0}")]
    NegativeBudget(i64),
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("segment infeasible: trajectories of length {len} cannot hold L={context} + K={horizon}")]
    SegmentInfeasible {
        len: usize,
        context: usize,
        horizon: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("loss node was not recorded on this tape")]
    UnrecordedLoss,
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("mismatched episode groups: {0}")]
    GroupMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
