use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("incompatible input shape {shape:?} for architecture `{arch}`: {reason}")]
    IncompatibleInput {
        arch: String,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid split plan (head={head}, tail={tail}) for a graph of {units} split units")]
    InvalidSplit { head: usize, tail: usize, units: usize },

    #[error("non-finite loss during {stage} (epoch {epoch}, batch {batch}): {value}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        value: f32,
    },

    #[error("invalid selector: {0}")]
    InvalidSelector(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
