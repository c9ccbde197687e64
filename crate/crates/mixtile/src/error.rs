//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown dtype tag `{0}`")]
    UnknownDtype(String),

    #[error("data length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, found {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("non-finite input at index {0}")]
    NonFinite(usize),

    #[error("unsupported bit width {0}")]
    UnsupportedBits(u8),

    #[error("kv cache capacity exceeded: capacity {capacity}, requested {requested}")]
    CapacityExceeded { capacity: usize, requested: usize },

    #[error("kv cache is empty")]
    EmptyCache,

    #[error("head_dim mismatch: cache has {cache}, input has {input}")]
    HeadDimMismatch { cache: usize, input: usize },

    #[error("swizzle chunk index {0} out of range (0..8)")]
    ChunkOutOfRange(usize),

    #[error("ldmatrix row address {0:#x} is not 16-byte aligned")]
    MisalignedRowAddress(u64),

    #[error("bad magic: expected {expected:?}, found {actual:?}")]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },

    #[error("unsupported container version {0}")]
    BadVersion(u32),

    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("shape {rows}x{cols} is not padded to the required {row_mult}x{col_mult} tile multiple")]
    UnpaddedShape {
        rows: usize,
        cols: usize,
        row_mult: usize,
        col_mult: usize,
    },

    #[error("sub-word permutation id mismatch: fragment has {found}, profile expects {expected}")]
    PermutationMismatch { expected: u32, found: u32 },

    #[error("packed weights were produced for arch id {packed}, active profile is {active}")]
    ArchMismatch { packed: u32, active: u32 },

    #[error("unknown arch profile `{0}` (known: sm80, sm90)")]
    UnknownArch(String),

    #[error("schedule contains a dependency cycle")]
    CyclicSchedule,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
