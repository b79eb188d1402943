use std::fmt;

use thiserror::Error;

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Validation,
    Io,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("head-count mismatch: {qk} QK heads vs {vo} VO heads")]
    HeadMismatch { qk: usize, vo: usize },

    #[error("mask index out of range: layer {layer} {side} head {head} channel {channel}")]
    MaskOutOfRange {
        layer: usize,
        side: &'static str,
        head: usize,
        channel: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fisher accumulator is stale: it was built for a different model shape")]
    StaleAccumulator,

    #[error("fisher accumulator holds no samples")]
    EmptyAccumulator,

    #[error("split '{0}' is empty")]
    EmptySplit(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("target sparsity would remove every unit of layer {layer}")]
    LayerExhausted { layer: usize },

    #[error("allocation instance has {units} candidate units, limit is {limit}")]
    InstanceTooLarge { units: usize, limit: usize },

    #[error("plan failed validation:\n{}", list_violations(.0))]
    InvalidPlan(Vec<crate::apply::Violation>),

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    CountMismatch { expected: usize, actual: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("pruning step {step} failed: {source}")]
    StepFailed { step: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn list_violations(v: &[crate::apply::Violation]) -> String {
    v.iter()
        .map(|v| format!("  {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_)
            | Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::CountMismatch { .. }
            | Error::Parse(_) => ErrorClass::Io,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::StepFailed { source, .. } => source.class(),
            Error::InvalidArgument(_) | Error::EmptySplit(_) => ErrorClass::Usage,
            _ => ErrorClass::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
