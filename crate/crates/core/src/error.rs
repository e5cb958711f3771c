use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("sample `{sample_id}`: missing {spectrum} image at {path}")]
    MissingImage {
        sample_id: String,
        spectrum: &'static str,
        path: PathBuf,
    },

    #[error("sample `{sample_id}`: {detail}")]
    Validation { sample_id: String, detail: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("need at least {needed} identities, dataset has {available}")]
    NotEnoughIdentities { needed: usize, available: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("anchor {anchor} has no {kind} in the batch")]
    NoTripletPartner { anchor: usize, kind: &'static str },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss at step {step}, batch {batch}: {breakdown}")]
    NonFiniteLoss {
        step: usize,
        batch: String,
        breakdown: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
