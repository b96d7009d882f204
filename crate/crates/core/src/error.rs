use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // ingest
    #[error("malformed RAWCT header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("unsupported dtype: {0}")]
    UnsupportedDType(String),
    #[error("xml syntax error: {0}")]
    XmlSyntaxError(String),
    #[error("malignancy rating {0} out of range 1..=5")]
    RatingOutOfRange(i64),
    #[error("roi has no vertices")]
    EmptyPolygon,
    #[error("vertex ({x}, {y}, {z}) outside volume bounds")]
    VertexOutOfBounds { x: i64, y: i64, z: i64 },

    // consensus / qif
    #[error("mask is empty")]
    EmptyMask,
    #[error("design {design} yields no {class} items")]
    EmptyClass { design: String, class: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // patchset
    #[error("center ({0:.2}, {1:.2}, {2:.2}) outside volume")]
    CenterOutOfBounds(f64, f64, f64),
    #[error("patch shape must be odd and positive, got {0:?}")]
    InvalidShape([usize; 3]),
    #[error("degenerate normalization range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),

    // qif
    #[error("seed ({0}, {1}, {2}) outside volume")]
    SeedOutOfBounds(i64, i64, i64),

    // nn
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // classifiers / eval
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("scores contain a single class")]
    SingleClass,
    #[error("too few patients: {0}")]
    TooFewPatients(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
}
