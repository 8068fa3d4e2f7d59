//! Error type shared by all core modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(String),

    #[error("loss function is not deterministic under a fixed seed ({0} vs {1})")]
    NonDeterministicLoss(f64, f64),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("episode already terminated; reset the environment before stepping")]
    EpisodeTerminated,

    #[error("replay buffer not warm: need {required} contiguous steps, have {available}")]
    NotWarm { required: usize, available: usize },

    #[error("task {0} has no cluster assignment")]
    ClusterUnassigned(usize),

    #[error("kv cache overflow: length {len} at capacity {capacity}")]
    CacheOverflow { len: usize, capacity: usize },

    #[error("cluster count {clusters} exceeds task count {tasks}")]
    TooManyClusters { clusters: usize, tasks: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Invalid(String),
}
