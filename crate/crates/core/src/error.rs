use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("mixture components overlap (separation {separation:.4} < required {required:.4})")]
    OverlappingComponents { separation: f64, required: f64 },
    #[error("KL divergence is infinite: a sample falls outside the target support")]
    InfiniteKl,
    #[error("constrained problem is infeasible (margin {margin:.6} >= 1)")]
    Infeasible { margin: f64 },
    #[error("dual variable {index} must be positive")]
    NonPositiveDual { index: usize },
    #[error("supports overlap: constraint {constraint} shares atom `{atom}`")]
    SupportsOverlap { constraint: usize, atom: String },
    #[error("exact enumeration needs {needed} trajectories, budget is {budget}")]
    EnumerationBudgetExceeded { needed: u128, budget: u128 },
    #[error("step {t} has alpha_bar = 1; score is undefined")]
    DegenerateStep { t: usize },
    #[error("training diverged at dual iteration {iteration}")]
    TrainingDiverged { iteration: usize },
    #[error("sampling diverged in chain {chain} at step {step}")]
    SamplingDiverged { chain: usize, step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
