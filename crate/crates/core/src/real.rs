//! Scalar type selection.
//!
//! Everything numeric in the crate is written against [`Real`], which is
//! `f64` unless the `f32` feature is enabled. Tolerances used by the
//! self-checks live here so they move with the precision.

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Relative tolerance for comparing a kernel with its naive-loop oracle.
#[cfg(not(feature = "f32"))]
pub const ORACLE_REL_TOL: Real = 1e-6;
#[cfg(feature = "f32")]
pub const ORACLE_REL_TOL: Real = 1e-4;

/// Relative tolerance for central finite-difference gradient checks.
#[cfg(not(feature = "f32"))]
pub const FD_REL_TOL: Real = 1e-4;
#[cfg(feature = "f32")]
pub const FD_REL_TOL: Real = 2e-2;

/// Finite-difference step.
#[cfg(not(feature = "f32"))]
pub const FD_STEP: Real = 1e-5;
#[cfg(feature = "f32")]
pub const FD_STEP: Real = 1e-2;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: Real, b: Real, floor: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
