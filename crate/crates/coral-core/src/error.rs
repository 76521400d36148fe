use alloc::string::String;
use core::fmt;

/// Crate-wide error type. Variants carry enough context to name the failing
/// operation; numerical failures (NaN/Inf) are always surfaced as errors
/// rather than being allowed to propagate through tensor data.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced a non-finite value.
    NonFinite { op: &'static str },
    /// `gradient` was called on a non-scalar root.
    NonScalarRoot { shape: String },
    /// Reconstruction loss became non-finite during encoding.
    NonFiniteLoss { step: usize },
    /// A latent code was used in the wrong space (raw vs normalized).
    SpaceTag { expected: &'static str, found: &'static str },
    /// Two field samples do not live on the same grid.
    GridMismatch,
    /// An operation requiring data received an empty collection.
    Empty { what: &'static str },
    /// A configuration or argument value is out of its valid range.
    InvalidParam { what: &'static str, detail: String },
    /// Latent ODE state norm exceeded the blow-up bound during a rollout.
    BlowUp { time: f64 },
    /// A training rollout blew up; carries epoch and trajectory context.
    TrainDiverged { epoch: usize, trajectory: usize, time: f64 },
    /// Outer training step failed; carries the sample index and the
    /// inner-step losses observed up to the failure.
    OuterStepFailed { sample: usize, inner_losses: alloc::vec::Vec<f64> },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            CoreError::NonFinite { op } => {
                write!(f, "non-finite result in `{op}`")
            }
            CoreError::NonScalarRoot { shape } => {
                write!(f, "gradient root must be a scalar, got shape {shape}")
            }
            CoreError::NonFiniteLoss { step } => {
                write!(f, "non-finite reconstruction loss at inner step {step}")
            }
            CoreError::SpaceTag { expected, found } => {
                write!(f, "latent code space mismatch: expected {expected}, found {found}")
            }
            CoreError::GridMismatch => write!(f, "field samples live on different grids"),
            CoreError::Empty { what } => write!(f, "empty {what}"),
            CoreError::InvalidParam { what, detail } => {
                write!(f, "invalid {what}: {detail}")
            }
            CoreError::BlowUp { time } => {
                write!(f, "latent state blow-up during rollout at t = {time}")
            }
            CoreError::TrainDiverged { epoch, trajectory, time } => {
                write!(
                    f,
                    "rollout blow-up at t = {time} (epoch {epoch}, trajectory {trajectory})"
                )
            }
            CoreError::OuterStepFailed { sample, inner_losses } => {
                write!(
                    f,
                    "outer step failed on sample {sample}; inner-step losses: {inner_losses:?}"
                )
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
