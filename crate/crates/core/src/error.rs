use std::io;

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;
use crate::training::ConfigError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("categorical supports differ: {q} vs {p} classes")]
    SupportMismatch { q: usize, p: usize },
    #[error("{what}: index {index} out of range for {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("observation is not binary at pixel {index} (value {value})")]
    NonBinary { index: usize, value: f64 },
    #[error("non-finite loss at step {step} (minibatch {batch_id})")]
    NonFinite {
        step: usize,
        batch_id: usize,
        batch_indices: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
