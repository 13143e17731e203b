use thiserror::Error;

use crate::geo::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("coordinates out of range: lat={lat}, lon={lon}")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("geohash precision must be in 1..=12, got {0}")]
    InvalidPrecision(usize),
    #[error("invalid geohash key {0:?}")]
    InvalidKey(String),
    #[error("invalid bounding box {0:?}")]
    InvalidBBox(BBox),
}

/// Why a raw record could not become a packet.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WrapError {
    #[error("no adapter registered for source {0:?}")]
    UnknownSource(String),
    #[error("record has no usable coordinates")]
    MissingGeo,
    #[error("malformed timestamp: {0}")]
    MalformedTime(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

impl WrapError {
    /// Stable label used as the drop-reason key in pipeline statistics.
    pub fn reason(&self) -> &'static str {
        match self {
            WrapError::UnknownSource(_) => "unknown_source",
            WrapError::MissingGeo => "missing_geo",
            WrapError::MalformedTime(_) => "malformed_time",
            WrapError::MalformedRecord(_) => "malformed_record",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("adapter for source {0:?} is already registered")]
    DuplicateSource(String),
    #[error("invalid adapter spec: {0}")]
    InvalidAdapter(String),
    #[error("cannot parse adapter config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("class {0:?} has no seed terms")]
    EmptyClass(String),
    #[error("threshold must be in (0, 1], got {0}")]
    Threshold(String),
}
