use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state space: {0}")]
    InvalidStateSpace(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("joint state space has {states} states, above the oracle cap of {cap}")]
    OracleTooLarge { states: usize, cap: usize },

    #[error("data format error: {0}")]
    Format(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("impossible evidence for node {node} at t = {time}")]
    ImpossibleEvidence { node: usize, time: f64 },

    #[error("negative probability for node {node} near t = {time}; reduce the time step")]
    StepSize { node: usize, time: f64 },

    #[error("search space has {candidates} candidate parent sets per node; use greedy or restricted search")]
    SearchSpaceTooLarge { candidates: u128 },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
