//! Error type shared by the whole math core.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes do not line up. The message names the operation and
    /// both shapes so the caller does not have to reconstruct them.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A scalar or configuration value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input to the symmetric eigensolver deviates from its transpose by
    /// more than the relative tolerance.
    #[error("matrix not symmetric: asymmetry {asymmetry:.3e} exceeds {tolerance:.3e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    /// The Jacobi sweep limit was reached before the off-diagonal mass fell
    /// under the convergence threshold.
    #[error("eigensolver did not converge after {sweeps} sweeps, off-diagonal norm {offdiag:.3e}")]
    NoConvergence { sweeps: usize, offdiag: f64 },

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Weight container parse failure other than a checksum mismatch.
    #[error("weight file: {0}")]
    WeightFormat(String),

    /// Stored CRC32 does not match the bytes that precede it.
    #[error("weight file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// A training loop stopped early; `reason` says why (NaN loss,
    /// divergence past the abort ratio, ...).
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
