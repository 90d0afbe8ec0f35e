use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PsmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PsmError {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("softmax row {row} has no unmasked positions")]
    AllMasked { row: usize },

    #[error("static scan needs a power-of-two length, got {0}")]
    NotPowerOfTwo(usize),

    #[error("sequence length {len} is not a multiple of chunk size {chunk}")]
    ChunkMisaligned { len: usize, chunk: usize },

    #[error("counter is empty: nothing has been inserted")]
    EmptyCounter,

    #[error("binary counter overflow: slot index {0} exceeds 63")]
    SlotOverflow(usize),

    #[error("affine pair mismatch: {0}")]
    AffineMismatch(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("weight file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad magic bytes in weight file")]
    BadMagic,

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt weight file: {0}")]
    CorruptFile(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PsmError {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        PsmError::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
