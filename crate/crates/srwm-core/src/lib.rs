//! Self-referential weight matrices and fast weight programmer layers at
//! desk scale: exact hand-derived gradients, a synthetic few-shot episode
//! harness, a deterministic training loop, and an independent verification
//! suite (finite-difference oracle, naive reference forwards, layer
//! invariants).

pub mod episodes;
pub mod error;
pub mod fwp;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real, Rng};
