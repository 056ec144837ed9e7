use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read WAV file {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("clip too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("slice [{start}, {end}) s is outside a clip of {len} s")]
    OutOfRange { start: f64, end: f64, len: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no onsets: the clip carries no rhythmic energy")]
    NoOnsets,

    #[error("undefined key: chroma has no pitch-class contrast")]
    UndefinedKey,

    #[error("undefined SNR: {0} stem is silent")]
    UndefinedSnr(&'static str),

    #[error("beat grid is empty")]
    EmptyGrid,

    #[error(
        "no mashable pair found for {failed} of {total} vocal segments; \
         try increasing the tempo tolerance"
    )]
    NoMashablePairs { failed: usize, total: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("bad checkpoint magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint is truncated or malformed: {0}")]
    Truncated(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singer {singer} is missing tracks: {detail}")]
    MissingTracks { singer: String, detail: String },

    #[error("no qualifying segment in track {0}")]
    NoQualifyingSegment(String),

    #[error("not enough points for the requested perplexity: {0}")]
    TooFewPoints(String),

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
