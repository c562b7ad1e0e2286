//! Meshfree learning and forecasting of PDE dynamics from scattered
//! time-series measurements.
//!
//! The pipeline couples Gaussian RBF collocation with two small neural
//! networks: one producing spatial-derivative features of the kernel between
//! site pairs, one mapping those features to the time derivative of the
//! field. A trained model steps measurements forward in time under arbitrary
//! Dirichlet boundary conditions and evaluates the field at arbitrary
//! locations through the RBF expansion.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod rbf;
pub mod train;

pub use error::{Error, Result};
