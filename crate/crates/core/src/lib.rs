//! Discrepancy-guided flow matching.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod gating;
pub mod measures;
pub mod optim;
pub mod refine;
pub mod residual;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod verify;

pub use error::{CheckpointError, Error, Result};
