//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! kind of failure so a frontend can map them onto exit categories
//! (configuration vs. numerical vs. I/O) without string matching.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Underlying file-system failure while reading or writing `path`.
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A data file exists but its content cannot be interpreted.
    #[error("malformed data in {path}: {reason}")]
    Parse { path: String, reason: String },

    /// Structurally invalid configuration: orders, ranges, option clashes.
    /// These are user errors, detectable before any numerics run.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A frequency grid violated its invariants (empty, unsorted, ≤ 0, …).
    #[error("invalid frequency grid: {0}")]
    Grid(String),

    /// An FRF dataset violated its invariants (dimensions, covariance, …).
    #[error("invalid dataset: {0}")]
    Dataset(String),

    /// Model structure or parameter vector violated its invariants.
    #[error("invalid model: {0}")]
    Model(String),

    /// Evaluation requested at (or numerically indistinguishable from) a pole.
    #[error("evaluation at a pole of submodel {submodel} (s = {s_re:e}{s_im:+e}j)")]
    PoleEvaluation {
        submodel: usize,
        s_re: f64,
        s_im: f64,
    },

    /// A linear-algebra routine failed in a way that indicates a genuinely
    /// ill-posed problem (exactly singular factor, non-finite input, …).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The normal-equation matrix of an estimation step is singular or
    /// near-singular. Carries a condition estimate to aid diagnosis.
    #[error("singular normal equations in {context}: condition estimate {cond:e}")]
    SingularNormalEquations { context: String, cond: f64 },

    /// Backend (LAPACK) returned a nonzero info code.
    #[error("lapack {routine} failed: {detail}")]
    Lapack { routine: String, detail: String },
}

impl Error {
    /// Helper shaping `std::io::Error` with the offending path attached.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
