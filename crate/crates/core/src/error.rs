use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range 0..{len}")]
    Range { index: usize, len: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    #[error("singular schedule: signal coefficient is zero at training step {step}")]
    SingularSchedule { step: usize },

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    Vocabulary { id: u32, vocab: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("could not place {entities} entities after {attempts} attempts")]
    Placement { entities: usize, attempts: usize },

    #[error("requested {requested} items from a pool of {available}")]
    Size { requested: usize, available: usize },

    #[error("no non-special tokens remain after filtering")]
    EmptySubject,

    #[error("subject at prompt position {position} cannot be resolved")]
    SubjectResolution { position: usize },

    #[error("missing generation record for prompt {prompt_id} seed {seed}")]
    Completeness { prompt_id: String, seed: u64 },

    #[error("bad magic bytes in checkpoint")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("shift {shift}: {source}")]
    Shift {
        shift: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sampling step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn numeric(layer: impl Into<String>) -> Self {
        Error::Numeric {
            layer: layer.into(),
        }
    }
}
