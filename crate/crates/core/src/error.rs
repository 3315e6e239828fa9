//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Operand shapes invalid for an op; names the op and the offending dims.
    ShapeMismatch { op: &'static str, detail: String },
    /// Backward was requested on a non-scalar value.
    LossNotScalar { numel: usize },
    /// Backward was requested on a value with no tape node.
    LossDetached,
    /// `straight_through_scaled` requires a tracked second operand.
    TrackedValueDetached,
    /// `straight_through_scaled` requires a detached first operand.
    FullValueTracked,
    /// Regularized covariance was not positive definite (epsilon too small).
    NotPositiveDefinite { class: usize },
    /// A support class has no examples.
    EmptyClass { class: usize },
    /// The support set is empty.
    EmptySupport,
    /// Backprop subset larger than the support set in without-replacement mode.
    SubsetTooLarge { h: usize, n: usize },
    /// Dataset cannot supply the requested episode shape.
    InsufficientExamples { class: usize, have: usize, need: usize },
    /// Configuration rejected; the message names the offending field.
    InvalidConfig(String),
    /// Unknown parameter name in a store or gradient map.
    UnknownParam(String),
    /// Training aborted on a non-finite loss.
    NonFiniteLoss { iteration: u64, task_seed: u64 },
    /// A computation produced a non-finite value.
    NonFiniteValue { context: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            Error::LossNotScalar { numel } => {
                write!(f, "backward needs a scalar loss, got {numel} elements")
            }
            Error::LossDetached => write!(f, "backward needs a tracked loss, got a detached value"),
            Error::TrackedValueDetached => {
                write!(f, "straight_through_scaled: tracked_value has no tape node")
            }
            Error::FullValueTracked => {
                write!(f, "straight_through_scaled: full_value must be detached")
            }
            Error::NotPositiveDefinite { class } => write!(
                f,
                "regularized covariance for class {class} is not positive definite (increase epsilon)"
            ),
            Error::EmptyClass { class } => write!(f, "class {class} has no support examples"),
            Error::EmptySupport => write!(f, "support set is empty"),
            Error::SubsetTooLarge { h, n } => {
                write!(f, "H={h} exceeds support size N={n} in without-replacement mode")
            }
            Error::InsufficientExamples { class, have, need } => write!(
                f,
                "class {class} has {have} examples, episode needs {need}"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::UnknownParam(name) => write!(f, "unknown parameter '{name}'"),
            Error::NonFiniteLoss { iteration, task_seed } => write!(
                f,
                "non-finite loss at iteration {iteration} (task seed {task_seed})"
            ),
            Error::NonFiniteValue { context } => write!(f, "non-finite value in {context}"),
        }
    }
}

impl core::error::Error for Error {}
