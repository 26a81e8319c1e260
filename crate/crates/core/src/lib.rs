//! Metamorphic testing toolkit for image classifiers.
//!
//! The crate bundles two reference classifiers written from first
//! principles (a kernel SVM solved in the dual and a small residual CNN),
//! the metamorphic relations that must hold for correct implementations of
//! them, a registry of injectable faults, and a harness that runs relation
//! suites over clean and faulty subjects to build kill matrices.

pub mod cnn;
pub mod dataset;
pub mod error;
pub mod faults;
pub mod grid;
pub mod harness;
pub mod metamorphic;
pub mod rng;
pub mod svm;

pub use error::{Error, Result};
