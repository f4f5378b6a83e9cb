//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by the named operation.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single operand with an unusable shape.
    #[error("invalid shape in {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    /// A model or training configuration field violates its invariant.
    #[error("config error in `{field}`: {msg}")]
    Config { field: &'static str, msg: String },

    /// A mask that cannot be constructed or applied.
    #[error("mask error: {0}")]
    Mask(String),

    /// Bad runtime input (token ids, prompts, corpus sizes, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: loss={loss} lr={lr} grad_norm={grad_norm}")]
    Diverged {
        iteration: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    /// A checkpoint file that cannot be decoded; `offset` is the byte position
    /// at which decoding failed.
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            field,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
