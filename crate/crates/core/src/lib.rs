//! Parameter mapping for MR fingerprinting by least-squares fitting of a
//! B-spline interpolated, sparsely sampled signal dictionary.
//!
//! The pipeline: simulate atoms with [`bloch`] on a [`pgrid::ParameterGrid`],
//! optionally compress them ([`dict`]), prefilter B-spline coefficients
//! ([`spline`]), size the grid to a target interpolation error ([`resolve`]),
//! and estimate per-voxel parameters by matching or fitting ([`estimate`]).

pub mod bloch;
pub mod dict;
pub mod error;
pub mod estimate;
pub mod format;
pub mod harness;
pub mod model;
pub mod pgrid;
pub mod resolve;
pub mod spline;

pub use num_complex::Complex64;

pub use error::{Error, Result};
