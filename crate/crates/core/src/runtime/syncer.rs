use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregation::{merge_fragment, MergeConfig};
use crate::causality::VectorClock;
use crate::config::GraceConfig;
use crate::error::Result;
use crate::fragmentation::FragmentPlan;
use crate::optim::OuterOptState;

use super::learner::{gather, scatter};

/// Result of one sync round, broadcast to every connected learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFragment {
    pub round: u64,
    pub fragment: u32,
    pub values: Arc<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncerState {
    pub t: u64,
    pub theta: Vec<f64>,
    pub outer: Vec<OuterOptState>,
    pub vclock: VectorClock,
}

impl SyncerState {
    pub fn new(theta: Vec<f64>, plan: &FragmentPlan, lr: f64, mu: f64, nesterov: bool) -> Result<Self> {
        let numerics = !theta.is_empty();
        let outer = (0..plan.num_fragments())
            .map(|p| OuterOptState::new(if numerics { plan.fragment_len(p) } else { 0 }, lr, mu, nesterov))
            .collect::<Result<_>>()?;
        Ok(SyncerState { t: 0, theta, outer, vclock: VectorClock::new() })
    }

    /// Merges the pulled fragments against the current global value, applies
    /// the outer step and returns the new global fragment. With no usable
    /// weight the global value is rebroadcast unchanged.
    pub fn merge_round(
        &mut self,
        plan: &FragmentPlan,
        cfg: &MergeConfig,
        embedding_mask: &[bool],
        round: u64,
        p: usize,
        thetas: &[&[f64]],
        weights: &[f64],
    ) -> Result<GlobalFragment> {
        self.t = self.t.max(round);
        let fragment = p as u32;
        if self.theta.is_empty() {
            return Ok(GlobalFragment { round, fragment, values: Arc::new(Vec::new()) });
        }
        let prev = gather(plan, &self.theta, p)?;
        if thetas.is_empty() || weights.iter().all(|&w| w == 0.0) {
            return Ok(GlobalFragment { round, fragment, values: Arc::new(prev) });
        }
        let merged = merge_fragment(cfg, thetas, weights, &prev, embedding_mask)?;
        let next = match &merged.anchor {
            Some(anchor) => self.outer[p].step_anchored(&merged.delta, anchor)?,
            None => self.outer[p].step(&prev, &merged.delta)?,
        };
        scatter(plan, &mut self.theta, p, &next)?;
        Ok(GlobalFragment { round, fragment, values: Arc::new(next) })
    }

    pub fn checksum(&self) -> u64 {
        crate::model::checksum(&self.theta)
    }
}

/// Exponential moving average; the first sample initializes it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ema {
    value: Option<f64>,
}

impl Ema {
    pub fn update(&mut self, decay: f64, x: f64) {
        self.value = Some(match self.value {
            Some(v) => decay * v + (1.0 - decay) * x,
            None => x,
        });
    }

    pub fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn is_set(&self) -> bool {
        self.value.is_some()
    }
}

/// Extra wait after quorum: `min(gamma * max(slack, 0), cap)` with
/// `slack = tau * xi_step - (xi_quorum + xi_sync)`. The cap defaults to one step.
pub fn grace_window(cfg: &GraceConfig, xi_step: f64, xi_quorum: f64, xi_sync: f64, tau: u64) -> f64 {
    let slack = tau as f64 * xi_step - (xi_quorum + xi_sync);
    let cap = cfg.cap.unwrap_or(xi_step);
    (cfg.gamma * slack.max(0.0)).min(cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grace_examples() {
        let g = GraceConfig { enabled: true, gamma: 0.8, ema_decay: 0.9, cap: None };
        assert_eq!(grace_window(&g, 1.0, 0.2, 0.5, 2), 1.0);
        let uncapped = GraceConfig { cap: Some(10.0), ..g };
        let w = grace_window(&uncapped, 1.0, 0.2, 0.5, 2);
        assert!((w - 0.8 * 1.3).abs() < 1e-12);
        assert_eq!(grace_window(&g, 1.0, 1.5, 0.5, 2), 0.0);
        let tiny = GraceConfig { gamma: 1e-9, ..g };
        assert!(grace_window(&tiny, 1.0, 0.0, 0.0, 2) < 1e-8);
    }

    #[test]
    fn ema_tracks() {
        let mut e = Ema::default();
        assert!(!e.is_set());
        e.update(0.5, 2.0);
        assert_eq!(e.get(), 2.0);
        e.update(0.5, 4.0);
        assert_eq!(e.get(), 3.0);
    }
}
