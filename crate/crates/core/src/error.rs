use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tissue parameters: {0}")]
    InvalidParams(String),

    #[error("invalid acquisition schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("coordinate {value} outside domain of axis {axis}")]
    OutOfDomain { axis: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("atom has zero norm")]
    DegenerateAtom,

    #[error("dictionary has no atoms")]
    EmptyDictionary,

    #[error("operation not supported: {0}")]
    Unsupported(String),

    #[error("singular banded system in prefilter")]
    SingularSystem,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported file version {0}")]
    VersionMismatch(u32),

    #[error("file truncated")]
    TruncatedFile,

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("phantom layout has overlapping regions {0} and {1}")]
    LayoutOverlap(usize, usize),

    #[error(transparent)]
    Io(#[from] io::Error),
}
