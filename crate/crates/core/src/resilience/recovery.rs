//! Joining a running job: peer choice, transfer cost, budget and the shadow
//! check used to validate a recovered learner.

use crate::error::{Error, Result};
use crate::fragmentation::FragmentPlan;
use crate::runtime::learner::LearnerState;
use crate::runtime::syncer::GlobalFragment;

/// The lowest-id healthy learner.
pub fn select_peer(healthy: impl IntoIterator<Item = u16>) -> Result<u16> {
    healthy.into_iter().min().ok_or_else(|| Error::RecoveryUnavailable("no healthy peer".into()))
}

/// Time to ship parameters plus both inner-optimizer moments.
pub fn transfer_time(params: usize, bandwidth_bits: f64, latency: f64) -> f64 {
    if bandwidth_bits > 0.0 {
        latency + 3.0 * params as f64 * 64.0 / bandwidth_bits
    } else {
        latency
    }
}

/// Recovery must finish within one sync cycle of the state it started from.
pub fn within_budget(latest_round: u64, t_s: u64, cycle: u64) -> bool {
    latest_round.saturating_sub(t_s) <= cycle
}

/// The state a learner would hold had it continuously held `peer` and then
/// received `rounds` in order.
pub fn shadow_replay(peer: &LearnerState, rounds: &[GlobalFragment], plan: &FragmentPlan, alpha: f64) -> Result<LearnerState> {
    let mut s = peer.clone();
    for g in rounds {
        s.apply(plan, g, alpha)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peer_selection() {
        assert_eq!(select_peer([3, 1, 2]).unwrap(), 1);
        assert!(matches!(select_peer(Vec::<u16>::new()), Err(Error::RecoveryUnavailable(_))));
    }

    #[test]
    fn budget_and_cost() {
        assert!(within_budget(30, 6, 24));
        assert!(!within_budget(31, 6, 24));
        assert_eq!(transfer_time(1000, 0.0, 0.5), 0.5);
        assert!((transfer_time(1000, 192_000.0, 0.0) - 1.0).abs() < 1e-12);
    }
}
