//! Crate-wide error type.

use std::path::PathBuf;

use crate::autodiff::Shape;
use crate::callbacks::Hook;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building graphs, fitting, or
/// persisting state.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on shape.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    /// An operand or constructor argument has an unusable shape.
    #[error("invalid shape in {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    /// `backward` was asked to differentiate a non-scalar.
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: Shape },

    /// The optimizer found a parameter without a gradient.
    #[error("parameter '{name}' has no gradient; call backward before step")]
    MissingGrad { name: String },

    /// A state lookup missed.
    #[error("missing state key '{label}'")]
    MissingKey { label: String },

    /// A state entry held a different kind than the caller expected.
    #[error("state key '{label}': expected {expected}, found {found}")]
    KindMismatch {
        label: String,
        expected: &'static str,
        found: &'static str,
    },

    /// A component was configured in a way that cannot run.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (non-scalar loss term, etc).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A callback failed; the hook and callback are identified.
    #[error("callback '{callback}' failed at {hook}: {source}")]
    Callback {
        hook: Hook,
        callback: String,
        source: Box<Error>,
    },

    /// The loss left the realm of finite numbers.
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    /// Filesystem trouble.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file does not start with the checkpoint magic.
    #[error("not a checkpoint")]
    NotACheckpoint,

    /// The checkpoint was written by a newer format revision.
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    /// The checkpoint ends or degenerates mid-section.
    #[error("corrupt at offset {offset}")]
    Corrupt { offset: u64 },

    /// A loaded record does not fit the receiving trial.
    #[error("load mismatch: {0}")]
    LoadMismatch(String),
}
