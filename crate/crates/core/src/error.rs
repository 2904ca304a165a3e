use std::fmt;

use crate::arch::ValidationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("derived channel count for {what} is {value}, must be at least 1")]
    ChannelUnderflow { what: String, value: usize },

    #[error("architecture failed validation: {}", ValidationList(.0))]
    Invalid(Vec<ValidationError>),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("no prunable normalization layers in architecture")]
    NoPrunableNorms,

    #[error("budget of {target} MACs is infeasible; the smallest reachable model costs {minimum} MACs")]
    BudgetInfeasible { target: u64, minimum: u64 },

    #[error("feature matrices disagree on batch size ({left} vs {right})")]
    BatchMismatch { left: usize, right: usize },

    #[error("degenerate feature matrix: {0}")]
    DegenerateInput(&'static str),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("distillation tap mismatch: {0}")]
    TapMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint architecture hash {found} does not match expected {expected}")]
    ArchHashMismatch { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct ValidationList<'a>(&'a [ValidationError]);

impl fmt::Display for ValidationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}
