use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("mask plan error: {0}")]
    Plan(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid clip spec: {0}")]
    Spec(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
