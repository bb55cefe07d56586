//! Crate-wide error type.

/// Errors surfaced by any module of the crate.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Two tensors fed to an op do not have compatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A NaN or infinity appeared during evaluation.
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },

    /// A graph was used incorrectly (backward before eval, bad seed shape, …).
    #[error("graph misuse: {0}")]
    Graph(String),

    /// Two generated samples coincide below the distance floor; the entropy
    /// estimator cannot proceed (this indicates generator collapse).
    #[error(
        "collapsed samples: rows {a} and {b} are closer than the floor {floor:e} \
         (nearest-neighbor distance {dist:e})"
    )]
    CollapsedSamples { a: usize, b: usize, dist: f64, floor: f64 },

    /// A filter consists entirely of zeros, so its gauge scale is undefined.
    #[error("zero filter during gauge fixing: layer {layer}, filter {filter}")]
    ZeroFilter { layer: usize, filter: usize },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Malformed IDX data file.
    #[error("idx format: {0}")]
    Idx(String),

    /// Malformed or invalid weight-bank file.
    #[error("weight bank: {0}")]
    Bank(String),

    /// Invalid configuration (schema violation, bad value, missing file).
    #[error("config: {0}")]
    Config(String),

    /// Invalid argument to a library call.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for attaching a path to an io::Error.
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
