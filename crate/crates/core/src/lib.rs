//! Streaming and chunked clustering of pixel-detector hits.

pub mod chunked_clusterer;
pub mod cluster;
pub mod datagen;
pub mod error;
pub mod hit_model;
pub mod ingest_sort;
pub mod merger;
pub mod oracle_metrics;
pub mod pipeline;
pub mod serial_clusterer;
pub mod temporal_splitter;

pub use cluster::{BBox, Cluster};
pub use error::{Error, Result};
pub use hit_model::{CalibrationMap, DetectorConfig, Energy, Hit, Nanos, RawHit};
pub use serial_clusterer::{ClusterDefinition, Variant};
