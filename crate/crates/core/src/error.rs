use std::fmt;

use thiserror::Error;

/// An architectural incompatibility that blocks a baseline objective.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Violation {
    EmbeddingSize { teacher: usize, student: usize },
    AttentionHead { teacher: usize, student: usize },
}

impl Violation {
    /// Constraint name as printed in the compatibility table.
    pub fn constraint(&self) -> &'static str {
        match self {
            Violation::EmbeddingSize { .. } => "Embedding size",
            Violation::AttentionHead { .. } => "Attention head",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmbeddingSize { teacher, student } => {
                write!(f, "Embedding size (teacher {teacher} != student {student})")
            }
            Violation::AttentionHead { teacher, student } => {
                write!(f, "Attention head (teacher {teacher} != student {student})")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("constraint violation: {}", join(.0))]
    ConstraintViolation(Vec<Violation>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
