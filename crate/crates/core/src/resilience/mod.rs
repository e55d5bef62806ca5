//! Consistent snapshots and learner recovery.

pub mod recovery;
pub mod snapshot;
