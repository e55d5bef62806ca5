//! Re-running a tape through the executor, and producing tapes without numerics.

use std::sync::Arc;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::tasks::Task;
use crate::runtime::executor::Executor;
use crate::runtime::sim::Simulator;

use super::tape::Tape;

/// Applies every tape event in order. Quorum membership, weights, failures
/// and recoveries all come from the tape; nothing is decided again.
pub fn replay(tape: &Tape, cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<Executor> {
    replay_into(tape, cfg, Executor::new(cfg, task)?)
}

/// Like [`replay`], also recording a checksum after every state change.
pub fn replay_traced(tape: &Tape, cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<Executor> {
    replay_into(tape, cfg, Executor::new(cfg, task)?.with_trace())
}

fn replay_into(tape: &Tape, cfg: &ExperimentConfig, mut exec: Executor) -> Result<Executor> {
    let run = cfg.replay_hash();
    if tape.header.config_hash != run {
        return Err(Error::ConfigHashMismatch { tape: tape.header.config_hash.clone(), run });
    }
    exec.set_snapshot_store(None);
    for e in &tape.events {
        exec.handle_recorded(e)?;
    }
    Ok(exec)
}

/// Runs the scheduler with chaos and speed heterogeneity but no model, and
/// returns the schedule it produced.
pub fn generate_synthetic_tape(cfg: &ExperimentConfig) -> Result<Tape> {
    Ok(Simulator::new(cfg, None)?.run()?.tape)
}
