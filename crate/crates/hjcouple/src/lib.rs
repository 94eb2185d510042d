//! Numerical verification of coupling-based comparison principles for
//! Hamilton-Jacobi-Bellman-Isaacs equations on `R^q`.

pub mod cli;
pub mod convolve;
pub mod couplings;
pub mod doubling;
pub mod error;
pub mod expr;
pub mod funcspace;
pub mod operators;
pub mod penalty;
pub mod report;
pub mod resolvent;

pub use error::{Error, Result};
