use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("modality-alignment error: audio frontend produced {audio} frames but visual frontend produced {video}")]
    ModalityAlignment { audio: usize, video: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("degenerate signal: cannot reach a finite SNR on a zero-power signal")]
    DegenerateSignal,

    #[error("non-deterministic function: repeated evaluation gave {first} then {second}")]
    Determinism { first: f64, second: f64 },

    #[error("incomplete gradient: parameter `{0}` has no gradient")]
    IncompleteGradient(String),

    #[error("gradient undefined: {0}")]
    Gradient(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite total loss at step {step}; batch utterances: {utt_ids:?}")]
    NonFiniteLoss { step: usize, utt_ids: Vec<String> },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
