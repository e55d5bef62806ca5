//! Asynchronous fragment-wise outer optimization with minimum-quorum
//! aggregation, plus the simulation, replay and checkpointing machinery
//! needed to exercise it deterministically at desk scale.

pub mod aggregation;
pub mod bandwidth;
pub mod causality;
pub mod chaos;
pub mod config;
pub mod error;
pub mod fragmentation;
pub mod harness;
pub mod model;
pub mod optim;
pub mod resilience;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
