use std::path::PathBuf;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("rate matrix is reducible: null space has dimension > 1")]
    Reducible,

    #[error("state {state} has zero exit rate")]
    ZeroExitRate { state: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cycle {cycle} exceeded the step cap of {cap} jumps")]
    RunawayCycle { cycle: u64, cap: u64 },

    #[error("time step {dt} violates stability limit; admissible dt <= {admissible}")]
    Cfl { dt: f64, admissible: f64 },

    #[error("negative concentration {value} in state {state}, cell {cell}")]
    NegativeMass {
        state: usize,
        cell: usize,
        value: f64,
    },

    #[error("total mass is zero")]
    ZeroMass,

    #[error("discrete operator kernel is not one-dimensional")]
    KernelDimension,

    #[error("solvability condition violated: residual {residual:e}")]
    Solvability { residual: f64 },

    #[error("all optimizer starts failed: {}", .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
