use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {kind}: {shapes:?}")]
    ShapeMismatch { kind: &'static str, shapes: Vec<Vec<usize>> },
    #[error("non-finite output from {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid attribute for {kind}: {detail}")]
    InvalidAttr { kind: &'static str, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
