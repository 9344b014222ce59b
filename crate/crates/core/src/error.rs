use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside [0, 1] for {map} map")]
    Domain { map: &'static str, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate orbit: {0}")]
    DegenerateOrbit(String),

    #[error("invalid range: {lo} > {hi}")]
    InvalidRange { lo: usize, hi: usize },

    #[error("crop size {crop} exceeds image size {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint mismatch for {name}: expected {expected:?}, found {found:?}")]
    CheckpointMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),

    #[error("class {class} has {count} items, fewer than {folds} folds")]
    ClassTooSmall {
        class: usize,
        count: usize,
        folds: usize,
    },

    #[error("class id {id} out of range for {n_classes} classes")]
    IdOutOfRange { id: usize, n_classes: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
