//! Quantum-diamond-microscope fault analysis.
//!
//! Maps and file formats live in [`maps_io`], NV physics and ODMR synthesis in
//! [`nv_model`], per-pixel spectral inversion in [`odmr_inversion`], field and
//! current-density transforms in [`magnetostatics`], and the failure-analysis
//! tools in [`fault_analysis`]. [`cli`] wires them into the `qdmfa` binary.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fault_analysis;
pub mod magnetostatics;
pub mod maps_io;
pub mod nv_model;
pub mod odmr_inversion;
pub mod scenario;

mod fft2;
mod lm;

pub use error::{Error, Result};
