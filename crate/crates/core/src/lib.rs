//! Event-of-interest detection and multi-resolution serving for geotagged text streams.

pub mod detect;
pub mod eoi;
pub mod error;
pub mod eval;
pub mod geo;
pub mod index;
pub mod packet;
pub mod pipeline;
pub mod query;
pub mod scalar;
pub mod scope;
pub mod text;

pub use eoi::{EventCluster, Scale, ScaleMap};
pub use error::{AdapterError, CorpusError, GeoError, QueryError, SnapshotError, WrapError};
pub use geo::{BBox, GeohashKey};
pub use index::{snapshot::SnapshotStore, EoiStore, IndexConfig, PyramidIndex, TimeRange};
pub use packet::{DataPacket, RawRecord};
pub use scalar::Scalar;

/// TF-IDF term vector used throughout the pipeline.
pub type TermVector = text::SparseVector<f64>;
