use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("fit is degenerate: {0}")]
    FitDegenerate(String),

    #[error("latency budget {budget_s:.6} s does not exceed backbone time {backbone_s:.6} s")]
    BudgetInfeasible { budget_s: f64, backbone_s: f64 },

    #[error("capacity {c_max} unreachable: mask ratio exhausted with attacked count {last_count:.1}")]
    CapacityUnreachable { c_max: f64, last_count: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Format { path: path.into(), message: message.into() }
    }

    /// Process exit code for this error: 3 for infeasibility results,
    /// 2 for precondition/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::BudgetInfeasible { .. } | LabError::CapacityUnreachable { .. } => 3,
            LabError::Config(_)
            | LabError::Precondition(_)
            | LabError::Shape { .. }
            | LabError::Format { .. }
            | LabError::FitDegenerate(_) => 2,
            LabError::Diverged { .. } | LabError::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
