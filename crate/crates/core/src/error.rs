//! Crate-wide error type.

use crate::unlearn::SearchPoint;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A vector required to have positive norm was (numerically) zero.
    #[error("degenerate vector: norm {norm:e} below threshold in {context}")]
    DegenerateVector { norm: f64, context: &'static str },

    /// A tower produced a pre-normalization output with near-zero norm.
    #[error("degenerate embedding: {tower} tower output norm {norm:e} below threshold")]
    DegenerateEmbedding { tower: &'static str, norm: f64 },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Snapshot/delta was computed at different parameters than the model in hand.
    #[error("fingerprint mismatch in {context}: artifact {artifact:016x}, model {model:016x}")]
    FingerprintMismatch {
        context: String,
        artifact: u64,
        model: u64,
    },

    /// Artifact produced under a different run configuration.
    #[error("config hash mismatch: artifact {artifact:016x}, current {current:016x}")]
    ConfigHashMismatch { artifact: u64, current: u64 },

    #[error("no candidate layers: every layer has a degenerate forget gradient")]
    NoCandidateLayers,

    #[error("no text prototype for concept {0} present in the evaluation batch")]
    MissingPrototype(u32),

    #[error("gap ratio undefined for metric `{0}`: best value is zero")]
    UndefinedGapRatio(String),

    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    #[error("unsupported artifact version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Binary search aborted because the evaluator failed; carries the partial trace.
    #[error("evaluator failed at search step {step}: {source}")]
    SearchAborted {
        step: usize,
        partial: Vec<SearchPoint>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
