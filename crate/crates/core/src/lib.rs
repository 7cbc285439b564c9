//! Globally convergent inversion of the 1-d wave-equation coefficient.
//!
//! The pipeline simulates (or reads) boundary traces at `x = 0`, maps them to
//! pseudofrequency boundary data for a truncated Laguerre expansion, minimizes a
//! Carleman-weighted least-squares functional for the expansion coefficients,
//! and refines the recovered dielectric profile with an adjoint-state
//! time-domain fit.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod forward;
pub mod global;
pub mod io;
pub mod local;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod transform;

pub use error::{CipError, Result};
