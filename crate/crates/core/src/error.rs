use std::io;

use thiserror::Error;

/// Errors raised anywhere in the model stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error{}: {field}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data {
        line: Option<usize>,
        field: String,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn data_at(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
