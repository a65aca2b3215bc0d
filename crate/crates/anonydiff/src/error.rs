use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every subsystem of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid factors: {0}")]
    InvalidFactors(String),

    #[error("identical identities: id_a = id_c = {0}")]
    IdenticalIdentities(u64),

    #[error("shape mismatch: expected {expected:?}, got {got:?} in {context}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    #[error("input is not unit-norm (|norm - 1| = {0:.3e} exceeds tolerance)")]
    NonUnitNorm(f64),

    #[error("zero-vector input where a direction was required")]
    ZeroVector,

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("untrained network: {0}")]
    UntrainedNetwork(String),

    #[error("misaligned reference states: {0}")]
    MisalignedStates(String),

    #[error("sampling diverged at step {step}: non-finite state")]
    DivergedSampling { step: usize },

    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    DivergedTraining {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("content hash mismatch for {name}: manifest {expected}, actual {actual}")]
    HashMismatch {
        name: String,
        expected: String,
        actual: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: &[usize], got: &[usize], context: &str) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
            context: context.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
