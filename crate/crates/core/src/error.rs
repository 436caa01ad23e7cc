use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] lhuc_autograd::Error),
    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("decoder prefix of length {len} exceeds max {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("target needs {needed} frames but only {frames} are available")]
    TargetTooLongForFrames { needed: usize, frames: usize },
    #[error("token id {0} is outside the vocabulary")]
    BadToken(usize),
    #[error("adaptation set is empty")]
    EmptyAdaptationSet,
    #[error("adaptation loss diverged at step {step}: {loss} (initial {initial})")]
    DivergedLoss { step: usize, loss: f64, initial: f64 },
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("utterance has no tokens")]
    EmptyUtterance,
    #[error("utterances lack confidence scores")]
    NoConfidences,
    #[error("confidence dump contains a single class")]
    SingleClassDump,
    #[error("invalid corpus spec: {0}")]
    SpecInvalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("missing feature file {0}")]
    MissingFeatureFile(PathBuf),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SpecInvalid(_) => 2,
            Error::DivergedLoss { .. } | Error::Tensor(lhuc_autograd::Error::NonFinite(_)) => 4,
            _ => 3,
        }
    }
}
