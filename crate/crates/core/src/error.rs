use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single validation failure, addressed by the field that caused it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("the data contains no rows")]
    EmptyData,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("invalid analysis set-up: {}", join_fields(.0))]
    Validation(Vec<FieldError>),

    #[error("treatment column `{column}` has {levels} distinct values; only two groups are supported")]
    MultiGroup { column: String, levels: usize },

    #[error("categorical confounder `{0}` is degenerate after removing incomplete rows")]
    DegenerateColumn(String),

    #[error("cannot estimate a density: {0}")]
    DegenerateDensity(String),

    #[error("{0} group is empty")]
    EmptyGroup(&'static str),

    #[error("entropy balancing target is infeasible; worst constraint `{constraint}` (violation {violation:.3e})")]
    Infeasible { constraint: String, violation: f64 },

    #[error("collinear design columns: {}", .0.join(", "))]
    Collinear(Vec<String>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("cancelled")]
    Cancelled,
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
