//! Numerical tolerances shared by every module.

/// Algebraic identities (Hermiticity of outputs, Kraus completeness).
pub const ALGEBRAIC: f64 = 1e-12;
/// Slack allowed below zero for eigenvalues of a PSD matrix.
pub const PSD_SLACK: f64 = 1e-10;
/// Residual bound for `m v = lambda v`.
pub const EIGEN_RESIDUAL: f64 = 1e-9;
/// Hermiticity required of inputs to the eigensolver.
pub const HERMITIAN_INPUT: f64 = 1e-10;
/// Smallest trace that can still be renormalized.
pub const TRACE_FLOOR: f64 = 1e-12;
/// Concurrence at or below this value counts as zero.
pub const ZERO_CONCURRENCE: f64 = 1e-9;
/// Numerical floor below which a negative concurrence is an error rather than noise.
pub const CONCURRENCE_FLOOR: f64 = -1e-9;
/// Eigenvalue separation below which two eigenvalues are treated as one cluster.
pub const DEGENERACY: f64 = 1e-8;
