//! Numerical toolkit for the fourth-order conformally covariant operator
//! calculus on manifolds with boundary.
//!
//! The crate has three layers:
//!
//! * a finite-difference layer ([`stencil`], [`grid`], [`geometry`]) that
//!   turns coordinate charts into curvature and boundary data,
//! * an operator layer ([`operators`], [`conformal`], [`energy`]) with the
//!   interior operators, their boundary operator hierarchy, generic weight
//!   families, conformal rescaling and Gateaux linearization checks, and
//! * a model layer ([`solver`], [`models`], [`fourdim`]) with separable
//!   solvers on the flat half-space and the round hemisphere, hyperbolic
//!   scattering oracles, sharp trace-inequality constants, and the
//!   four-dimensional specialization.
//!
//! Everything is deterministic: random draws are seeded, and reductions are
//! sequential so reports are reproducible byte for byte.

pub mod conformal;
pub mod energy;
pub mod geometry;
pub mod grid;
pub mod jets;
pub mod operators;
pub mod report;
pub mod stencil;
pub mod testfields;
