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
    #[error("bad magic {found:?}, expected \"ISO1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing bytes after tensor payload: {0}")]
    TrailingBytes(u64),
    #[error("invalid tensor rank {0}, only 1-D and 2-D tensors are supported")]
    InvalidRank(u32),
    #[error("value {value} at element {index} is not representable as {dtype}")]
    LossyCast {
        index: usize,
        value: f64,
        dtype: &'static str,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: i64, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty band: k_t ({k_t}) + k_b ({k_b}) must be below rank {rank}")]
    BandEmpty { k_t: usize, k_b: usize, rank: usize },
    #[error("band width {width} invalid for rank {rank}")]
    InvalidWidth { width: usize, rank: usize },
    #[error("stale band: selected for rank {band_rank}, operator has rank {op_rank}")]
    StaleBand { band_rank: usize, op_rank: usize },
    #[error("row {row} projects to a (near) zero vector")]
    DegenerateEmbedding { row: usize },
    #[error("no query has a positive match in the gallery")]
    NoPositives,
    #[error("K = {k} out of range for gallery of {available} items (query {query})")]
    KOutOfRange {
        k: usize,
        available: usize,
        query: usize,
    },
    #[error("no {0} pairs available for the overlap histogram")]
    EmptyPairClass(&'static str),
    #[error("class {0} has no samples")]
    EmptyClass(i64),
    #[error("every sweep grid point is infeasible for rank {0}")]
    InfeasibleGrid(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("linear algebra routine failed: {0}")]
    Numerical(String),
}

impl Error {
    /// Stable machine-readable category, used for CLI error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::UnknownDtype(_)
            | Error::Truncated { .. }
            | Error::TrailingBytes(_)
            | Error::InvalidRank(_)
            | Error::LossyCast { .. } => "format",
            Error::Manifest(_) | Error::Json { .. } => "manifest",
            Error::ShapeMismatch(_) | Error::IndexOutOfRange { .. } => "shape",
            Error::NonFinite { .. } | Error::Degenerate(_) | Error::DegenerateEmbedding { .. } => {
                "degenerate"
            }
            Error::BandEmpty { .. }
            | Error::InvalidWidth { .. }
            | Error::StaleBand { .. }
            | Error::InfeasibleGrid(_) => "band",
            Error::NoPositives
            | Error::KOutOfRange { .. }
            | Error::EmptyPairClass(_)
            | Error::EmptyClass(_) => "evaluation",
            Error::InvalidParameter(_) => "parameter",
            Error::Numerical(_) => "numerical",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
