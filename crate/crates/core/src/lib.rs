//! Learned and classical solvers for the single-vehicle pickup-and-delivery
//! problem.
//!
//! Node `0` of an instance is the depot, nodes `1..=n` are pickups and node
//! `i + n` is the delivery paired with pickup `i`.

pub mod baselines;
pub mod decoder;
pub mod encoder;
pub mod env;
mod error;
pub mod instances;
pub mod model;
pub mod training;

pub use error::{PdpError, Result};
