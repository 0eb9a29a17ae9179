use thiserror::Error;

use crate::codebook::Scale;

/// Errors raised while parsing or validating a codebook file.
#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("bit strings may only contain 0 or 1, found `{0}`")]
    BadBitChar(char),
    #[error("scale must be 1, 2 or 3, got {0}")]
    InvalidScale(u8),
    #[error("missing `disease` declaration")]
    MissingDisease,
    #[error("missing `bit-order` declaration")]
    MissingBitOrder,
    #[error("missing `subtypes` declaration")]
    MissingSubtypes,
    #[error("missing `scale {0}` declaration")]
    MissingScale(u8),
    #[error("scale {0} schema stored out of order")]
    ScaleOutOfPlace(u8),
    #[error("a codebook needs at least 2 subtypes, got {0}")]
    TooFewSubtypes(usize),
    #[error("subtype `{0}` listed twice")]
    DuplicateSubtype(String),
    #[error("scale {0} lists no features")]
    EmptySchema(u8),
    #[error("scale {scale} lists {count} features, the maximum is 32")]
    SchemaTooWide { scale: u8, count: usize },
    #[error("duplicate feature name `{name}` at scale {scale}")]
    DuplicateFeature { scale: u8, name: String },
    #[error("row {row}: unknown subtype `{subtype}`")]
    UnknownRowSubtype { row: usize, subtype: String },
    #[error("row {row} ({subtype}, scale {scale}): expected {expected} bits, got {got}")]
    RowLengthMismatch { row: usize, subtype: String, scale: u8, expected: usize, got: usize },
    #[error("row {row} ({subtype}, scale {scale}, bits {bits}) duplicates an earlier row")]
    DuplicateRow { row: usize, subtype: String, scale: u8, bits: String },
    #[error("shortcut rule names unknown subtype `{0}`")]
    UnknownShortcutSubtype(String),
    #[error("shortcut rule names unknown feature `{feature}` at scale {scale}")]
    UnknownShortcutFeature { scale: u8, feature: String },
    #[error(
        "knowledge points of `{first}` and `{second}` collide at ({}, {}, {})",
        coord[0], coord[1], coord[2]
    )]
    PointCollision { coord: [u64; 3], first: String, second: String },
    #[error("unknown subtype `{0}`")]
    UnknownSubtype(String),
    #[error("code at scale {scale} has {got} bits, schema expects {expected}")]
    CodeLengthMismatch { scale: u8, expected: usize, got: usize },
}

/// Errors from thresholding and voting over bag predictions.
#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("label threshold must lie strictly inside (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("probability {value} at index {index} is outside [0, 1] or not finite")]
    InvalidProbability { index: usize, value: f64 },
    #[error("cannot vote over an empty set of bag predictions")]
    EmptyVote,
    #[error("bag predictions mix slide ids `{0}` and `{1}`")]
    MixedSlides(String, String),
    #[error("bag predictions for slide `{0}` mix scales {1} and {2}")]
    MixedScales(String, Scale, Scale),
    #[error("bag probability vectors differ in length: {0} vs {1}")]
    RaggedProbs(usize, usize),
    #[error("slide `{slide_id}` has no bag predictions at scale {scale}")]
    MissingScale { slide_id: String, scale: Scale },
    #[error("slide `{slide_id}`: {source}")]
    Slide { slide_id: String, source: Box<EnsembleError> },
}

/// Errors from projecting and classifying slide codes.
#[derive(Debug, Error)]
pub enum KnowspaceError {
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("slide `{slide_id}`: {source}")]
    Slide { slide_id: String, source: Box<KnowspaceError> },
}

/// Errors from the bag-level embedding model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training needs at least one epoch")]
    NoEpochs,
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    BadMomentum(f64),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("bags mix scales {0} and {1}")]
    MixedScales(Scale, Scale),
    #[error("loss diverged at epoch {epoch}, bag {bag_index} (slide `{slide_id}`)")]
    Diverged { epoch: usize, bag_index: usize, slide_id: String },
    #[error("checkpoint version {0} is not supported")]
    BadCheckpointVersion(u32),
    #[error("checkpoint is corrupt: {0}")]
    BadCheckpoint(String),
}

/// Errors from synthetic data generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("{field} must be at least 1")]
    ZeroCount { field: &'static str },
    #[error("flip_noise must lie in [0, 0.5), got {0}")]
    BadFlipNoise(f64),
    #[error("prob_jitter must lie in [0, 0.5), got {0}")]
    BadJitter(f64),
    #[error("instance width {width} is narrower than the scale-{scale} feature count {features}")]
    WidthTooSmall { width: usize, scale: u8, features: usize },
    #[error("per-subtype count names unknown subtype `{0}`")]
    UnknownCountSubtype(String),
}

/// Errors from evaluation metrics.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("truth and prediction lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label `{0}` does not appear in the label list")]
    UnknownLabel(String),
    #[error("labels list is empty or contains duplicates")]
    BadLabels,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

/// Errors from reading or writing the line-oriented data files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    JsonValue(#[from] serde_json::Error),
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}
