//! Low-rank quantum state tomography toolkit.
//!
//! The crate reconstructs an n-qubit density matrix from an incomplete set
//! of expectation values. Two estimators are provided:
//!
//! * [`svt`] — a singular value thresholding solver for the trace-norm
//!   regularized least-squares problem (Uzawa iteration),
//! * [`lqst`] — an unrolled network with the same per-layer structure whose
//!   measurement matrices, step sizes and thresholds are trained by
//!   gradient descent, plus a final layer that projects onto physical
//!   (unit-trace, PSD) states.
//!
//! Supporting modules: [`numlin`] (dense complex linear algebra sized for
//! small Hilbert spaces), [`quantum`] (states, observables, POVMs,
//! metrics), and [`train`] (datasets, Adam, training loops, checkpoints).

pub mod error;
pub mod lqst;
pub mod numlin;
pub mod quantum;
pub mod svt;
pub mod train;

pub use error::{Error, Result};
