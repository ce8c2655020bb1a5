use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced in {location}")]
    NonFinite { location: String },

    #[error(
        "guarded denominator in {location} under {rule}: |{value:e}| < {guard:e} at neuron {neuron}"
    )]
    GuardedDenominator {
        location: String,
        rule: String,
        neuron: usize,
        value: f64,
        guard: f64,
    },

    #[error("unsupported manifest format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("weight blob truncated: {needed} bytes required, {actual} available")]
    TruncatedBlob { needed: usize, actual: usize },

    #[error("weight blob has {actual} bytes but the manifest declares {declared}")]
    BlobLength { declared: usize, actual: usize },

    #[error("overlapping weight ranges in blob: {0}")]
    OverlappingRanges(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite weight in {0}")]
    NonFiniteWeight(String),

    #[error("unsupported layer: {0}")]
    Unsupported(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),

    #[error("graph has {count} vertices, cap is {cap}")]
    SizeCap { count: usize, cap: usize },

    #[error("graph contains a cycle")]
    Cyclic,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the variant, stable across releases; printed by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "DimensionError",
            Error::Domain(_) => "DomainError",
            Error::NonFinite { .. } => "NonFiniteError",
            Error::GuardedDenominator { .. } => "GuardedDenominatorError",
            Error::VersionMismatch { .. } => "VersionMismatchError",
            Error::TruncatedBlob { .. } => "TruncatedBlobError",
            Error::BlobLength { .. } => "BlobLengthError",
            Error::OverlappingRanges(_) => "OverlappingRangesError",
            Error::Shape(_) => "ShapeError",
            Error::NonFiniteWeight(_) => "NonFiniteWeightError",
            Error::Unsupported(_) => "UnsupportedLayerError",
            Error::MalformedHeader(_) => "MalformedHeaderError",
            Error::UnsupportedMaxval(_) => "UnsupportedMaxvalError",
            Error::SizeCap { .. } => "SizeCapError",
            Error::Cyclic => "CyclicGraphError",
            Error::InvalidGraph(_) => "InvalidGraphError",
            Error::Manifest(_) => "ManifestError",
            Error::Io { .. } => "IoError",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension(_)
            | Error::Domain(_)
            | Error::NonFinite { .. }
            | Error::GuardedDenominator { .. }
            | Error::SizeCap { .. }
            | Error::Cyclic
            | Error::InvalidGraph(_) => ErrorClass::Numeric,
            _ => ErrorClass::Io,
        }
    }
}
