use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Data-format and model-file failures get distinct
/// variants so callers (and the CLI exit-code contract) can tell them apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite gradient for layer {layer} ({param})")]
    NonFiniteGradient { layer: usize, param: &'static str },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("group size {group_size} too large to enumerate masks (max {max})")]
    EnumerationTooLarge { group_size: usize, max: usize },

    #[error("{path}: wrong IDX magic: expected {expected}, found {found}")]
    IdxWrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated: needed {needed} bytes, found {available}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: file size {size} is not a multiple of the {record}-byte record size")]
    BadRecordSize {
        path: PathBuf,
        size: usize,
        record: usize,
    },

    #[error("model file {path}: bad magic")]
    ModelBadMagic { path: PathBuf },

    #[error("model file {path}: unsupported format version {found} (this build reads version {supported})")]
    ModelBadVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("model file {path}: checksum mismatch (corrupt or truncated)")]
    ModelChecksum { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
