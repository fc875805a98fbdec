use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor or image failed validation (wrong channel count, non-finite values, bad size).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A caller violated an operation's precondition (shape mismatch, out-of-range argument).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("attempted to update parameters of a frozen classifier")]
    FrozenParameters,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("manifest schema error at entry {index}: {message}")]
    ManifestSchema { index: usize, message: String },

    #[error("entry {index} has label {label}; labels must be 0 or 1")]
    InvalidLabel { index: usize, label: i64 },

    #[error("duplicate manifest key (patient_id={patient_id}, pair_id={pair_id}) at entry {index}")]
    DuplicateKey {
        index: usize,
        patient_id: String,
        pair_id: String,
    },

    #[error("entry {index} references missing image {}", .path.display())]
    DanglingImage { index: usize, path: PathBuf },

    #[error("need at least {k} distinct patients for {k}-fold split, found {found}")]
    TooFewPatients { k: usize, found: usize },

    #[error("sample has no ground-truth warp")]
    MissingWarp,

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    Divergence { step: usize, epoch: usize },

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
