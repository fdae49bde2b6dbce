//! Numerical laboratory for entanglement sudden death under amplitude damping.
//!
//! Two-qubit states are evolved through a standard amplitude-damping channel,
//! a correlated post-selected damping channel and local NOT operations. The
//! crate also compiles the interferometric optical train into Kraus operators,
//! propagates systematic errors and simulates state tomography.

pub mod analysis;
pub mod channels;
pub mod error;
pub mod errors;
pub mod optics;
pub mod protocol;
pub mod qmat;
pub mod states;
pub mod tol;
pub mod tomography;

pub use error::{Error, Result};
pub use qmat::{ComplexMatrix, DensityMatrix, C64};
