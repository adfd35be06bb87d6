use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("unknown cost method `{0}`")]
    UnknownMethod(String),

    #[error("layer {target} needs cache of layer {source_layer}, which is not present")]
    MissingSource { target: usize, source_layer: usize },

    #[error("source caches for layer {target} have mismatched lengths {lengths:?}")]
    LengthMismatch { target: usize, lengths: Vec<usize> },

    #[error("non-finite value during {0}")]
    Evaluation(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
