use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] confbound::Error),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("stage-2 constraint not satisfied for {}", .0.join(", "))]
    Infeasible(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn manifest(msg: impl Into<String>) -> Self {
        HarnessError::Manifest(msg.into())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => e.kind(),
            HarnessError::Manifest(_) => "manifest",
            HarnessError::MissingFile(_) => "missing_file",
            HarnessError::Infeasible(_) => "infeasible",
            HarnessError::Io(_) => "io",
            HarnessError::Json(_) => "json",
            HarnessError::Csv(_) => "csv",
        }
    }

    /// Process exit code: 3 for bad input, 4 for infeasible stage-2 models,
    /// 5 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use confbound::Error as E;
        match self {
            HarnessError::Manifest(_) | HarnessError::MissingFile(_) | HarnessError::Json(_) | HarnessError::Csv(_) => {
                3
            }
            HarnessError::Core(
                E::Config(_) | E::Dimension { .. } | E::Data(_) | E::Checkpoint(_) | E::Json(_) | E::Csv(_),
            ) => 3,
            HarnessError::Infeasible(_) => 4,
            HarnessError::Core(
                E::NonFinite { .. }
                | E::Positivity(_)
                | E::DegenerateDensity { .. }
                | E::Quadrature { .. }
                | E::Diverged { .. },
            ) => 5,
            HarnessError::Core(E::Io(_)) | HarnessError::Io(_) => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        })
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
