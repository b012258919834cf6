use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_tl}, {y_tl}, {x_br}, {y_br}): corners out of order or non-finite")]
    InvalidBox {
        x_tl: f64,
        y_tl: f64,
        x_br: f64,
        y_br: f64,
    },
    #[error("IoU is undefined when both boxes have zero area")]
    UndefinedIou,
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidImageSize { width: f64, height: f64 },
    #[error("relative offset needs a candidate box with positive area")]
    ZeroAreaCandidate,
    #[error("token id {id} is outside the vocabulary of size {size}")]
    TokenOutOfVocabulary { id: usize, size: usize },
    #[error("{0} needs a non-empty sequence")]
    EmptySequence(&'static str),
    #[error("scene has no proposals")]
    EmptyScene,
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no attribute vocabulary is configured")]
    NoAttributes,
    #[error("no attribute labels found in the corpus")]
    EmptyAttributeSet,
    #[error("{}:{line}: {message}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("missing feature record for image {0}")]
    MissingFeatures(String),
    #[error("feature store {}: {message}", path.display())]
    FeatureStore { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("query {query} of image {image} has no ground-truth proposal")]
    MissingGroundTruth { image: String, query: usize },
    #[error("ground-truth proposal {proposal} does not exist in image {image}")]
    UnknownProposal { image: String, proposal: usize },
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("template could not be satisfied after {0} attempts")]
    Unsatisfiable(usize),
    #[error("unknown image id {0}")]
    UnknownImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
