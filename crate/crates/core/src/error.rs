use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the datapath, the loaders and the verification harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Q format: {0}")]
    InvalidFormat(String),

    #[error("NaN cannot be converted to fixed point")]
    NotANumber,

    #[error("fixed-point product overflows the {budget}-bit carrier ({value} x {other})")]
    CarrierOverflow { value: i64, other: i64, budget: u32 },

    #[error("combined fraction bits {0} exceed the 40-bit limit")]
    FractionBudget(u32),

    #[error("scale {value} at index {index} is outside the range of {format}")]
    ScaleOutOfRange {
        index: usize,
        value: f64,
        format: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error(transparent)]
    Coe(#[from] CoeError),

    #[error("layer {layer}: accumulator needs {needed} bits, budget is {budget}")]
    AccumulatorBudget {
        layer: String,
        needed: u32,
        budget: u32,
    },

    #[error("stream error in stage {stage}: {reason}")]
    Stream { stage: String, reason: String },

    #[error("pipeline deadlock at cycle {cycle}\n{dump}")]
    Deadlock { cycle: u64, dump: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image: {0}")]
    Image(String),

    #[error("head has {found} words, expected {expected}")]
    HeadLength { found: usize, expected: usize },

    #[error("{context}: {cause}")]
    Io {
        context: String,
        cause: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, cause: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            cause,
        }
    }
}

/// Manifest diagnostics. Every variant names the layer and field it concerns.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("layer {layer}: {field} blob {} is missing", path.display())]
    MissingBlob {
        layer: String,
        field: String,
        path: PathBuf,
    },

    #[error("layer {layer}: {field} blob has {actual} bytes, expected {expected}")]
    LengthMismatch {
        layer: String,
        field: String,
        expected: usize,
        actual: usize,
    },

    #[error("layer {layer}: {field} has unknown format {value:?}")]
    UnknownFormat {
        layer: String,
        field: String,
        value: String,
    },

    #[error("layer {layer}: {field}: {reason}")]
    Invalid {
        layer: String,
        field: String,
        reason: String,
    },
}

impl ManifestError {
    pub(crate) fn invalid(
        layer: impl Into<String>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        ManifestError::Invalid {
            layer: layer.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// COE parse diagnostics, positioned at 1-based line and column.
#[derive(Debug, Error)]
pub enum CoeError {
    #[error("{line}:{col}: malformed radix {value:?}")]
    Radix {
        line: usize,
        col: usize,
        value: String,
    },

    #[error("{line}:{col}: word {word:?} does not fit in {width} bits")]
    WordOverflow {
        line: usize,
        col: usize,
        word: String,
        width: u32,
    },

    #[error("{line}:{col}: invalid digit in word {word:?}")]
    Digit {
        line: usize,
        col: usize,
        word: String,
    },

    #[error("{line}:{col}: missing ';' terminator after initialization vector")]
    MissingTerminator { line: usize, col: usize },

    #[error("{line}:{col}: expected {expected}")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
    },

    #[error("unsupported word width {0}")]
    WordWidth(u32),
}
