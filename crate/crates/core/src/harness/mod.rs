//! Desk-scale learning tasks, the data-parallel baseline and experiment runs.

pub mod experiments;
pub mod tasks;
