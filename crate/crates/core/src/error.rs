use crate::hit_model::{Hit, Nanos};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pixel ({x}, {y}) outside {width}x{height} matrix")]
    CoordinateOutOfRange { x: u16, y: u16, width: u16, height: u16 },

    #[error("parse error at offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("truncated record at byte offset {offset}")]
    TruncatedInput { offset: u64 },

    #[error("hit {hit:?} arrives {displacement} ns behind the running maximum, bound is {bound} ns")]
    UnsortednessExceeded { hit: Hit, displacement: Nanos, bound: Nanos },

    #[error("write failed: {0}")]
    Write(#[source] std::io::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("out-of-order input: toa {got} after {previous}")]
    OutOfOrderInput { previous: Nanos, got: Nanos },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("hit buffer overflow: {len} hits reached capacity {capacity} (toa_max {toa_max} ns, offending toa {toa} ns)")]
    BufferOverflow { len: usize, capacity: usize, toa_max: Nanos, toa: Nanos },

    #[error("oracle limited to {limit} hits, instance has {len}")]
    OracleLimitExceeded { len: usize, limit: usize },

    #[error("clusterings are not comparable: {0}")]
    IncomparableClusterings(String),

    #[error("generator saturated: could not place cluster of {size} hits after {attempts} attempts")]
    GenerationSaturated { size: usize, attempts: usize },

    #[error("pipeline stage `{stage}` failed: {msg}")]
    PipelineFailure { stage: String, msg: String },

    #[error("pipeline aborted")]
    Aborted,
}
