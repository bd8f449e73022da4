use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("performance table miss: {0}")]
    TableMiss(String),

    #[error("schedule infeasible: {0}")]
    ScheduleInfeasible(String),

    #[error("memory infeasible: {0}")]
    MemoryInfeasible(String),

    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("no feasible parallelism candidate: {0}")]
    Exhausted(String),
}

impl Error {
    /// True for errors that describe an infeasible configuration rather than
    /// malformed input.
    pub fn is_infeasibility(&self) -> bool {
        matches!(
            self,
            Error::ScheduleInfeasible(_)
                | Error::MemoryInfeasible(_)
                | Error::PlacementInfeasible(_)
                | Error::Exhausted(_)
        )
    }
}
