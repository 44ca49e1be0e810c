use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite gradient in parameter {name} at index {index} (value {value})")]
    NonFiniteGradient {
        name: String,
        index: usize,
        value: f64,
    },

    #[error("training diverged: loss is {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("episode finished: step {t} >= horizon {horizon}")]
    EpisodeFinished { t: usize, horizon: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint truncated while reading tensor {0:?}")]
    Truncated(String),

    #[error("episode {episode} (seed {seed}): {source}")]
    Episode {
        episode: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
