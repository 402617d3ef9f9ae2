//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the tomography toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes (e.g. a 4x4 state against a
    /// 16-dimensional ensemble).
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        /// Operation or field where the mismatch was detected.
        context: String,
        /// Expected extent.
        expected: usize,
        /// Actual extent.
        actual: usize,
    },

    /// An argument is outside its documented domain (negative counts,
    /// non-finite entries, empty inputs, probabilities that do not sum
    /// to one, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A caller-visible precondition was violated (non-Hermitian input to
    /// an eigendecomposition, eigenvalues below the clamping tolerance of
    /// the fidelity, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative decomposition failed to reach its tolerance.
    #[error("decomposition failed: {0}")]
    Decomposition(String),

    /// The spectral backward pass hit a degenerate eigenvalue cluster it
    /// cannot differentiate through; perturbing the diagonal (mu > 0)
    /// removes the degeneracy.
    #[error("degenerate spectrum in backward pass: {0}")]
    Degeneracy(String),

    /// A forward evaluation produced a non-finite intermediate.
    #[error("numeric overflow in {context}: non-finite value at layer {layer}")]
    Overflow {
        /// Which computation overflowed.
        context: String,
        /// Unrolled layer index (0-based) where the value turned non-finite.
        layer: usize,
    },

    /// Serialized artifact has an unsupported version tag.
    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch {
        /// Version found in the file.
        found: u32,
        /// Version this build writes and reads.
        expected: u32,
    },

    /// Serialized artifact is structurally broken or fails its checksum.
    #[error("malformed file: {0}")]
    Malformed(String),

    /// Underlying I/O failure. The message carries no detail of its own so
    /// that error chains (which append the source) do not print it twice.
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a dimension-mismatch error.
    pub fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }
}
