use std::path::PathBuf;

use dualdiff_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Every problem found while validating a config, one per line.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("oracle problem is infeasible (margin s = {margin} >= 1)")]
    Infeasible { margin: f64 },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Self {
        let path = path.into();
        move |source| CliError::Csv { path, source }
    }

    /// 2 config, 3 numerical divergence, 4 infeasible oracle problem, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Parse { .. } => 2,
            CliError::Infeasible { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::TrainingDiverged { .. } | CoreError::SamplingDiverged { .. } => 3,
                CoreError::Infeasible { .. } => 4,
                CoreError::InvalidSchedule(_)
                | CoreError::InvalidConfig(_)
                | CoreError::InvalidDistribution(_)
                | CoreError::DimensionMismatch { .. }
                | CoreError::SupportsOverlap { .. } => 2,
                _ => 1,
            },
            CliError::Io { .. } | CliError::Csv { .. } => 1,
        }
    }
}
