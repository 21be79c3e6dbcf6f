use crate::autodiff::AutodiffError;
use crate::metrics::MetricError;
use crate::synth::DatasetError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
