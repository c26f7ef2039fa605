use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Structural(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("track has no face detection in any frame")]
    UnrecoverableTrack,

    #[error("data rank {rank} is below the requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("unsupported audio format: {0}")]
    Format(String),

    #[error("clip is silent after trimming")]
    EmptyAfterTrim,

    #[error("clip too short: {0}")]
    TooShort(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid duration {0} s")]
    InvalidDuration(f64),

    #[error("unknown phoneme symbol {0:?}")]
    UnknownSymbol(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("lip-space fingerprint mismatch: model expects {expected}, data has {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("shape mismatch for {name}: {expected:?} vs {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::UnrecoverableTrack => "unrecoverable_track",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Format(_) => "format",
            Error::EmptyAfterTrim => "empty_after_trim",
            Error::TooShort(_) => "too_short",
            Error::Config(_) => "config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::InvalidDuration(_) => "invalid_duration",
            Error::UnknownSymbol(_) => "unknown_symbol",
            Error::Empty(_) => "empty",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
            Error::Json(_) => "json",
            Error::Wav(_) => "wav",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
