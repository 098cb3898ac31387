use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition of an operation was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("no available modalities: the availability mask is all zero")]
    NoAvailableModalities,

    #[error("modality file absent: {modality} (looked for *_{suffix}.nii[.gz] in {dir})")]
    ModalityFileAbsent {
        modality: String,
        suffix: String,
        dir: PathBuf,
    },

    #[error("empty mask: normalization needs at least one voxel inside the mask")]
    EmptyMask,

    #[error("could not place lesion inside the brain after {attempts} attempts")]
    LesionPlacement { attempts: usize },

    #[error("crop of side {crop} does not fit volume of shape {shape:?}")]
    CropTooLarge { crop: usize, shape: [usize; 3] },

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFinite { component: String, step: u64 },

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("configuration mismatch on `{field}`: checkpoint has {checkpoint}, requested {requested}")]
    ConfigMismatch {
        field: String,
        checkpoint: String,
        requested: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid label value {value} in {context}")]
    InvalidLabel { value: i64, context: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("NIfTI error on {path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
