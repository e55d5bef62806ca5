use serde::{Deserialize, Serialize};

use crate::causality::{VectorClock, WorkerId};
use crate::error::{check_len, Error, Result};
use crate::fragmentation::FragmentPlan;
use crate::harness::tasks::Task;
use crate::model::ParamStore;
use crate::optim::{apply_received_fragment, InnerOptConfig, InnerOptState};

use super::syncer::GlobalFragment;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub steps: u64,
    pub tokens: u64,
}

/// One learner replica. `theta` is empty when the owning executor tracks
/// only the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub id: u16,
    pub theta: Vec<f64>,
    pub inner: InnerOptState,
    pub t_m: u64,
    pub t_known: u64,
    pub counters: Vec<Counter>,
    /// Round whose global value each fragment last received.
    pub versions: Vec<u64>,
    pub vclock: VectorClock,
}

/// Metadata sent after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub t_m: u64,
    pub t_known: u64,
    pub counters: Vec<Counter>,
}

impl LearnerState {
    pub fn new(id: u16, theta: Vec<f64>, inner: InnerOptConfig, fragments: usize) -> Self {
        let len = theta.len();
        LearnerState {
            id,
            theta,
            inner: InnerOptState::new(inner, len),
            t_m: 0,
            t_known: 0,
            counters: vec![Counter::default(); fragments],
            versions: vec![0; fragments],
            vclock: VectorClock::new(),
        }
    }

    pub fn has_numerics(&self) -> bool {
        !self.theta.is_empty()
    }

    /// One inner step on `tokens` tokens of this learner's shard. Returns the
    /// training loss when parameters are tracked.
    pub fn step(&mut self, task: Option<&dyn Task>, tokens: u64) -> Result<Option<f64>> {
        self.t_m += 1;
        self.vclock.observe(WorkerId::Learner(self.id), self.t_m);
        for c in &mut self.counters {
            c.steps += 1;
            c.tokens += tokens;
        }
        let Some(task) = task.filter(|_| self.has_numerics()) else {
            return Ok(None);
        };
        let tpe = task.tokens_per_example();
        if tokens == 0 || tokens % tpe != 0 {
            return Err(Error::InvalidArgument(format!("{tokens} tokens is not a whole number of examples")));
        }
        let batch = task.batch(self.id, self.t_m, (tokens / tpe) as usize);
        let (loss, grad) = task.loss_and_grad(&self.theta, &batch)?;
        self.inner.step(&mut self.theta, &grad)?;
        Ok(Some(loss))
    }

    pub fn metadata(&self) -> Metadata {
        Metadata { t_m: self.t_m, t_known: self.t_known, counters: self.counters.clone() }
    }

    /// Current values of fragment `p` (empty without numerics).
    pub fn fragment(&self, plan: &FragmentPlan, p: usize) -> Result<Vec<f64>> {
        if !self.has_numerics() {
            plan.tensors_of(p)?;
            return Ok(Vec::new());
        }
        gather(plan, &self.theta, p)
    }

    /// Installs a global fragment, resets its counters and advances the known
    /// syncer step.
    pub fn apply(&mut self, plan: &FragmentPlan, g: &GlobalFragment, alpha: f64) -> Result<()> {
        let p = g.fragment as usize;
        if p >= self.counters.len() {
            return Err(Error::FragmentRange(p));
        }
        if self.has_numerics() {
            let local = gather(plan, &self.theta, p)?;
            let merged = apply_received_fragment(&local, &g.values, alpha)?;
            scatter(plan, &mut self.theta, p, &merged)?;
        }
        self.counters[p] = Counter::default();
        self.versions[p] = g.round;
        self.t_known = self.t_known.max(g.round);
        self.vclock.observe(WorkerId::Syncer, g.round);
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        crate::model::checksum(&self.theta)
    }
}

pub(crate) fn gather(plan: &FragmentPlan, theta: &[f64], p: usize) -> Result<Vec<f64>> {
    let layout = tensor_ranges(plan, theta.len());
    let mut out = Vec::with_capacity(plan.fragment_len(p));
    for &t in plan.tensors_of(p)? {
        out.extend_from_slice(&theta[layout[t].clone()]);
    }
    Ok(out)
}

pub(crate) fn scatter(plan: &FragmentPlan, theta: &mut [f64], p: usize, values: &[f64]) -> Result<()> {
    check_len(plan.fragment_len(p), values.len())?;
    let layout = tensor_ranges(plan, theta.len());
    let mut off = 0;
    for &t in plan.tensors_of(p)? {
        let r = layout[t].clone();
        let n = r.len();
        theta[r].copy_from_slice(&values[off..off + n]);
        off += n;
    }
    Ok(())
}

fn tensor_ranges(plan: &FragmentPlan, total: usize) -> Vec<std::ops::Range<usize>> {
    let sizes = plan.tensor_sizes();
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        out.push(off..off + s);
        off += s;
    }
    debug_assert_eq!(off, total);
    out
}

/// Parameters wrapped with their layout, for callers that want tensor access.
pub fn as_store(task: &dyn Task, theta: &[f64]) -> Result<ParamStore> {
    ParamStore::from_values(task.layout(), theta.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragmentation::{FragmentPlan, Strategy};
    use crate::model::{TensorKind, TensorSpec};
    use std::sync::Arc;

    fn plan() -> FragmentPlan {
        let t: Vec<TensorSpec> = (0..4).map(|i| TensorSpec::new(format!("t{i}"), 2, TensorKind::Other)).collect();
        FragmentPlan::build(Strategy::Balanced, &t, 2).unwrap()
    }

    #[test]
    fn counters_after_one_tick() {
        let mut l = LearnerState::new(0, Vec::new(), InnerOptConfig::default(), 4);
        l.step(None, 64).unwrap();
        assert_eq!(l.t_m, 1);
        assert!(l.counters.iter().all(|c| c.steps == 1 && c.tokens == 64));
    }

    #[test]
    fn apply_after_count_leaves_zero() {
        let plan = plan();
        let mut l = LearnerState::new(0, vec![0.0; 8], InnerOptConfig::default(), 2);
        l.step(None, 64).unwrap();
        let len = plan.fragment_len(1);
        let g = GlobalFragment { round: 3, fragment: 1, values: Arc::new(vec![1.5; len]) };
        l.apply(&plan, &g, 0.0).unwrap();
        assert_eq!(l.counters[1], Counter::default());
        assert_eq!(l.counters[0].steps, 1);
        assert_eq!(l.t_known, 3);
        assert_eq!(l.fragment(&plan, 1).unwrap(), vec![1.5; len]);
        assert_eq!(l.vclock.get(WorkerId::Syncer), 3);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let plan = plan();
        let mut theta: Vec<f64> = (0..8).map(f64::from).collect();
        for p in 0..2 {
            let v = gather(&plan, &theta, p).unwrap();
            let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
            scatter(&plan, &mut theta, p, &doubled).unwrap();
        }
        assert_eq!(theta, (0..8).map(|i| 2.0 * i as f64).collect::<Vec<_>>());
    }
}
