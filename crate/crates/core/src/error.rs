use thiserror::Error;

/// Errors raised across the skillworld library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid retrieval key: {0}")]
    InvalidKey(String),
    #[error("embedding has zero norm")]
    DegenerateEmbedding,
    #[error("skill pool {0} is empty")]
    EmptyPool(&'static str),
    #[error("skill {skill} has domain {domain} which is in neither the ID nor the OOD set")]
    UnassignedDomain { skill: String, domain: String },
    #[error("domain {0} is declared both ID and OOD")]
    OverlappingDomains(String),
    #[error("duplicate skill id {0}")]
    DuplicateSkill(String),
    #[error("invalid skill {id}: {reason}")]
    InvalidSkill { id: String, reason: String },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("action {action} outside alphabet of size {size}")]
    InvalidAction { action: usize, size: usize },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no golden trajectories for distillation")]
    NoGoldenTrajectories,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
