//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngramError {
    #[error("trigger too short: {len} token(s), need at least 2")]
    TriggerTooShort { len: usize },
    #[error("max_n must be at least 2, got {0}")]
    MaxNTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    VocabOverflow { id: u32, vocab: usize },
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("match out of bounds: batch {batch}, span {start}..{end} in ({batch_size}, {seq_len})")]
    MatchOutOfBounds {
        batch: usize,
        start: usize,
        end: usize,
        batch_size: usize,
        seq_len: usize,
    },
    #[error("no concept vector for key index {0}")]
    MissingKey(usize),
    #[error("operation requires {expected} topology, got {got}")]
    TopologyMismatch { expected: &'static str, got: String },
    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("registry digest mismatch for stream {stream}: checkpoint has {found}, expected {expected}")]
    DigestMismatch {
        stream: String,
        expected: String,
        found: String,
    },
    #[error("unsupported checkpoint format version {0}")]
    VersionMismatch(u32),
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("locality violation outside matched spans at (batch {batch}, pos {pos}, channel {channel})")]
    LocalityViolation {
        batch: usize,
        pos: usize,
        channel: usize,
    },
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngramError>;
