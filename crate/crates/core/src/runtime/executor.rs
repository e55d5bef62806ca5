//! Applies tape events to learner and syncer state.
//!
//! The simulator and replay drive the same `Executor::handle`, so a recorded
//! run and its replay perform identical arithmetic in identical order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::aggregation::{contribution_weight, MergeConfig};
use crate::causality::{Admission, EventPayload, TapeEvent, WorkerId};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fragmentation::{assign_offsets, FragmentPlan};
use crate::harness::tasks::Task;
use crate::resilience::snapshot::{FileEntry, LearnerEntry, LearnerSnapshot, Manifest, SnapshotStore, SyncerSnapshot};

use super::learner::LearnerState;
use super::syncer::{GlobalFragment, SyncerState};
use super::transport::PulledFragment;

/// Builds the fragment plan a configuration describes.
pub fn build_plan(cfg: &ExperimentConfig) -> Result<FragmentPlan> {
    let layout = cfg.task.layout();
    let plan = FragmentPlan::build(cfg.runtime.strategy, layout.tensors(), cfg.runtime.fragments)?;
    assign_offsets(plan, cfg.runtime.cycle)
}

/// State captured by a peer for a joining learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub newcomer: u16,
    pub peer: u16,
    pub seq: u64,
    pub t_s: u64,
    pub state: LearnerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub worker: WorkerId,
    pub checksum: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecMetrics {
    /// Learners admitted with positive weight, per merged round.
    pub admitted: Vec<usize>,
    /// (learner, round, staleness) for the first contribution after each recovery.
    pub recovery_staleness: Vec<(u16, u64, u64)>,
    /// Largest `round - version` over all merged contributions.
    pub max_staleness: u64,
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Default)]
struct SnapProgress {
    syncer: Option<(u64, FileEntry)>,
    learners: BTreeMap<u16, (u64, FileEntry)>,
}

pub struct Executor {
    cfg: ExperimentConfig,
    task: Option<Arc<dyn Task>>,
    plan: FragmentPlan,
    masks: Vec<Vec<bool>>,
    merge: MergeConfig,
    learners: BTreeMap<u16, LearnerState>,
    retired: BTreeMap<u16, u64>,
    syncer: SyncerState,
    rounds: BTreeMap<u64, GlobalFragment>,
    pulls: BTreeMap<(u64, u16), PulledFragment>,
    transfers: BTreeMap<u16, Transfer>,
    /// Transfers served since the latest syncer snapshot cut, kept so a peer's
    /// checkpoint can carry those already consumed before it was taken.
    served: Vec<Transfer>,
    recovered: BTreeSet<u16>,
    store: Option<SnapshotStore>,
    progress: BTreeMap<u64, SnapProgress>,
    trace: Option<Vec<TraceEntry>>,
    pub metrics: ExecMetrics,
}

impl Executor {
    /// Fresh run state: learners `0..M` and the syncer share the initial
    /// parameters. Without a task only counters and schedule are tracked.
    pub fn new(cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<Self> {
        let plan = build_plan(cfg)?;
        let masks = (0..plan.num_fragments()).map(|p| plan.embedding_mask(p)).collect::<Result<_>>()?;
        let init = task.as_ref().map(|t| t.init_params()).unwrap_or_default();
        let o = &cfg.optim;
        let syncer = SyncerState::new(init.clone(), &plan, o.outer_lr, o.outer_momentum, o.nesterov)?;
        let learners = (0..cfg.runtime.learners as u16)
            .map(|m| (m, LearnerState::new(m, init.clone(), o.inner, plan.num_fragments())))
            .collect();
        let store = cfg.snapshot.dir.clone().filter(|_| cfg.snapshot.interval > 0).map(SnapshotStore::new);
        Ok(Executor {
            cfg: cfg.clone(),
            task,
            plan,
            masks,
            merge: cfg.merge,
            learners,
            retired: BTreeMap::new(),
            syncer,
            rounds: BTreeMap::new(),
            pulls: BTreeMap::new(),
            transfers: BTreeMap::new(),
            served: Vec::new(),
            recovered: BTreeSet::new(),
            store,
            progress: BTreeMap::new(),
            trace: None,
            metrics: ExecMetrics::default(),
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Writes snapshot files under `root` (or stops writing with `None`).
    pub fn set_snapshot_store(&mut self, root: Option<std::path::PathBuf>) {
        self.store = root.map(SnapshotStore::new);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &FragmentPlan {
        &self.plan
    }

    pub fn task(&self) -> Option<&Arc<dyn Task>> {
        self.task.as_ref()
    }

    pub fn learner(&self, m: u16) -> Option<&LearnerState> {
        self.learners.get(&m)
    }

    pub fn learners(&self) -> &BTreeMap<u16, LearnerState> {
        &self.learners
    }

    pub fn syncer(&self) -> &SyncerState {
        &self.syncer
    }

    pub fn round(&self, r: u64) -> Option<&GlobalFragment> {
        self.rounds.get(&r)
    }

    pub fn pulled(&self, round: u64, m: u16) -> Option<&PulledFragment> {
        self.pulls.get(&(round, m))
    }

    /// Stores a fragment pulled over a channel, for a syncer that does not
    /// hold the learner's state.
    pub(crate) fn insert_pull(&mut self, pf: PulledFragment) {
        self.pulls.insert((pf.round, pf.learner), pf);
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    /// Local step of learner `m`, remembered across crashes.
    pub fn learner_step(&self, m: u16) -> u64 {
        self.learners.get(&m).map(|l| l.t_m).or_else(|| self.retired.get(&m).copied()).unwrap_or(0)
    }

    /// Parameter checksum per live worker, syncer last.
    /// [`Executor::handle`] for a recorded event: any failure means the tape
    /// does not describe a run of this configuration.
    pub fn handle_recorded(&mut self, e: &TapeEvent) -> Result<()> {
        self.handle(e).map_err(|err| match err {
            Error::ReplayIntegrity { .. } | Error::ConfigHashMismatch { .. } | Error::Io(_) => err,
            other => Error::integrity(e.seq, other.to_string()),
        })
    }

    pub fn checksums(&self) -> BTreeMap<WorkerId, u64> {
        let mut out: BTreeMap<WorkerId, u64> =
            self.learners.iter().map(|(&m, l)| (WorkerId::Learner(m), l.checksum())).collect();
        out.insert(WorkerId::Syncer, self.syncer.checksum());
        out
    }

    /// Weight the syncer assigns to a pulled contribution; 0 when undefined.
    pub fn admission_weight(&self, c_tokens: u64, c_steps: u64) -> f64 {
        contribution_weight(self.merge.weight_mode, c_tokens, c_steps).unwrap_or(0.0)
    }

    pub fn admissions(&self, round: u64, learners: &[u16]) -> Result<Vec<Admission>> {
        learners
            .iter()
            .map(|&m| {
                let p = self.pulls.get(&(round, m)).ok_or_else(|| {
                    Error::InvalidArgument(format!("learner {m} has no pulled fragment for round {round}"))
                })?;
                Ok(Admission {
                    learner: m,
                    t_m: p.t_m,
                    c_steps: p.counter.steps,
                    c_tokens: p.counter.tokens,
                    weight: self.admission_weight(p.counter.tokens, p.counter.steps),
                })
            })
            .collect()
    }

    fn learner_mut(&mut self, m: u16, seq: u64) -> Result<&mut LearnerState> {
        self.learners.get_mut(&m).ok_or_else(|| Error::integrity(seq, format!("event for unknown learner L{m}")))
    }

    fn record_trace(&mut self, seq: u64, worker: WorkerId) {
        if self.trace.is_none() {
            return;
        }
        let checksum = match worker {
            WorkerId::Learner(m) => self.learners.get(&m).map_or(0, |l| l.checksum()),
            WorkerId::Syncer => self.syncer.checksum(),
        };
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEntry { seq, worker, checksum });
        }
    }

    pub fn handle(&mut self, e: &TapeEvent) -> Result<()> {
        let seq = e.seq;
        let learner_id = e.worker.learner();
        let need_learner = || learner_id.ok_or_else(|| Error::integrity(seq, "learner event recorded by the syncer"));
        match &e.payload {
            EventPayload::Step { tokens } => {
                let m = need_learner()?;
                let task = self.task.clone();
                let l = self.learner_mut(m, seq)?;
                if e.local_step != l.t_m + 1 {
                    return Err(Error::integrity(seq, format!("L{m} step {} does not follow {}", e.local_step, l.t_m)));
                }
                if let Some(loss) = l.step(task.as_deref(), *tokens)? {
                    self.metrics.train_losses.push(loss);
                }
                self.record_trace(seq, e.worker);
            }
            EventPayload::MetadataRecv { .. } => {}
            EventPayload::FragmentPull { step, fragment } => {
                let m = need_learner()?;
                let p = *fragment as usize;
                let plan = &self.plan;
                let l = self.learners.get(&m).ok_or_else(|| Error::integrity(seq, format!("pull from unknown L{m}")))?;
                let counter = *l.counters.get(p).ok_or_else(|| Error::integrity(seq, "fragment out of range"))?;
                let pulled = PulledFragment {
                    learner: m,
                    round: *step,
                    fragment: *fragment,
                    t_m: l.t_m,
                    counter,
                    version: l.versions[p],
                    values: l.fragment(plan, p)?,
                };
                self.pulls.insert((*step, m), pulled);
            }
            EventPayload::QuorumClose { step, fragment, admitted } => {
                self.close_round(seq, *step, *fragment, admitted)?;
                self.record_trace(seq, WorkerId::Syncer);
            }
            EventPayload::FragmentApply { round, fragment } => {
                let m = need_learner()?;
                let g = self
                    .rounds
                    .get(round)
                    .cloned()
                    .ok_or_else(|| Error::integrity(seq, format!("apply of unknown round {round}")))?;
                if g.fragment != *fragment {
                    return Err(Error::integrity(seq, format!("round {round} carried fragment {}", g.fragment)));
                }
                let (plan, alpha) = (&self.plan, self.cfg.optim.alpha);
                let l = self.learners.get_mut(&m).ok_or_else(|| Error::integrity(seq, format!("unknown L{m}")))?;
                l.apply(plan, &g, alpha)?;
                self.record_trace(seq, e.worker);
            }
            EventPayload::Failure { crash, .. } => {
                if *crash {
                    let m = need_learner()?;
                    let l = self.learners.remove(&m).ok_or_else(|| Error::integrity(seq, format!("crash of unknown L{m}")))?;
                    if l.t_m != e.local_step {
                        return Err(Error::integrity(seq, format!("L{m} crashed at step {} but holds {}", e.local_step, l.t_m)));
                    }
                    self.retired.insert(m, l.t_m);
                    self.recovered.remove(&m);
                    self.pulls.retain(|&(_, who), _| who != m);
                }
            }
            EventPayload::RecoveryServe { newcomer, t_s } => {
                let peer = need_learner()?;
                let state = self
                    .learners
                    .get(&peer)
                    .cloned()
                    .ok_or_else(|| Error::integrity(seq, format!("unknown peer L{peer}")))?;
                let tr = Transfer { newcomer: *newcomer, peer, seq, t_s: *t_s, state };
                if self.store.is_some() {
                    self.served.push(tr.clone());
                }
                self.transfers.insert(*newcomer, tr);
            }
            EventPayload::Recovery { peer, t_s } => {
                let m = need_learner()?;
                let tr = self
                    .transfers
                    .remove(&m)
                    .filter(|t| t.peer == *peer && t.t_s == *t_s)
                    .ok_or_else(|| Error::integrity(seq, format!("L{m} has no transfer from L{peer} at {t_s}")))?;
                let mut state = tr.state;
                state.id = m;
                state.t_m = state.t_m.max(self.retired.remove(&m).unwrap_or(0));
                state.vclock = e.vclock.clone();
                self.learners.insert(m, state);
                self.recovered.insert(m);
                self.record_trace(seq, e.worker);
            }
            EventPayload::RecoveryAbort { .. } => {
                let m = need_learner()?;
                self.transfers.remove(&m);
            }
            EventPayload::SnapshotBegin { snapshot, pending } => self.snapshot_begin(e, *snapshot, pending)?,
            EventPayload::SnapshotEnd { snapshot, absent, in_flight } => {
                self.snapshot_end(*snapshot, absent, in_flight);
            }
        }
        match e.worker {
            WorkerId::Learner(m) => {
                if let Some(l) = self.learners.get_mut(&m) {
                    l.vclock = e.vclock.clone();
                }
            }
            WorkerId::Syncer => self.syncer.vclock = e.vclock.clone(),
        }
        Ok(())
    }

    fn close_round(&mut self, seq: u64, step: u64, fragment: Option<u32>, admitted: &[Admission]) -> Result<()> {
        if step <= self.syncer.t && self.syncer.t > 0 {
            return Err(Error::integrity(seq, format!("round {step} closes after round {}", self.syncer.t)));
        }
        self.syncer.t = step;
        let Some(f) = fragment else {
            return Ok(());
        };
        let p = f as usize;
        if p >= self.plan.num_fragments() {
            return Err(Error::integrity(seq, format!("fragment {p} out of range")));
        }
        let mut pulled = Vec::with_capacity(admitted.len());
        for a in admitted {
            let got = self
                .pulls
                .remove(&(step, a.learner))
                .ok_or_else(|| Error::integrity(seq, format!("round {step} admits L{} without a pull", a.learner)))?;
            if got.fragment != f
                || got.t_m != a.t_m
                || got.counter.steps != a.c_steps
                || got.counter.tokens != a.c_tokens
            {
                return Err(Error::integrity(seq, format!("L{} pulled state disagrees with the tape", a.learner)));
            }
            let w = self.admission_weight(a.c_tokens, a.c_steps);
            if w.to_bits() != a.weight.to_bits() {
                return Err(Error::integrity(seq, format!("L{} weight {} != recorded {}", a.learner, w, a.weight)));
            }
            pulled.push((got, w));
        }
        self.pulls.retain(|&(r, _), _| r > step);

        let live: Vec<&(PulledFragment, f64)> = pulled.iter().filter(|(_, w)| *w > 0.0).collect();
        self.metrics.admitted.push(live.len());
        for (pf, _) in &live {
            let staleness = step.saturating_sub(pf.version);
            self.metrics.max_staleness = self.metrics.max_staleness.max(staleness);
            if self.recovered.remove(&pf.learner) {
                self.metrics.recovery_staleness.push((pf.learner, step, staleness));
            }
        }
        let thetas: Vec<&[f64]> = live.iter().map(|(pf, _)| pf.values.as_slice()).collect();
        let weights: Vec<f64> = live.iter().map(|(_, w)| *w).collect();
        let g = self.syncer.merge_round(&self.plan, &self.merge, &self.masks[p], step, p, &thetas, &weights)?;
        self.rounds.insert(step, g);
        Ok(())
    }

    fn snapshot_begin(&mut self, e: &TapeEvent, snapshot: u64, pending: &[u64]) -> Result<()> {
        let Some(store) = self.store.as_ref() else {
            return Ok(());
        };
        let written = match e.worker {
            WorkerId::Syncer => {
                let snap = SyncerSnapshot {
                    snapshot,
                    seq: e.seq,
                    syncer: SyncerState { vclock: e.vclock.clone(), ..self.syncer.clone() },
                    transfers: self.transfers.values().cloned().collect(),
                    retired: self.retired.clone(),
                };
                self.served.clear();
                store.write_syncer(&snap).map(|f| self.progress.entry(snapshot).or_default().syncer = Some((e.seq, f)))
            }
            WorkerId::Learner(m) => {
                let l = self.learners.get(&m).ok_or_else(|| Error::integrity(e.seq, format!("unknown L{m}")))?;
                let pending = pending
                    .iter()
                    .map(|r| {
                        self.rounds.get(r).cloned().ok_or_else(|| Error::integrity(e.seq, format!("unknown round {r}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let snap = LearnerSnapshot {
                    snapshot,
                    seq: e.seq,
                    state: LearnerState { vclock: e.vclock.clone(), ..l.clone() },
                    pending,
                    transfers: self
                        .transfers
                        .values()
                        .chain(&self.served)
                        .filter(|t| t.peer == m)
                        .cloned()
                        .collect(),
                };
                store
                    .write_learner(m, &snap)
                    .map(|f| self.progress.entry(snapshot).or_default().learners.insert(m, (e.seq, f)).map(|_| ()))
                    .map(|_| ())
            }
        };
        if let Err(err) = written {
            // Checkpointing must never stop training.
            warn!("snapshot {snapshot}: persisting {} failed: {err}", e.worker);
        }
        Ok(())
    }

    fn snapshot_end(&mut self, snapshot: u64, absent: &[u16], in_flight: &[crate::causality::InFlight]) {
        let Some(store) = self.store.as_ref() else {
            return;
        };
        let Some(progress) = self.progress.remove(&snapshot) else {
            return;
        };
        let Some((syncer_seq, syncer)) = progress.syncer else {
            warn!("snapshot {snapshot}: syncer state missing; snapshot abandoned");
            return;
        };
        let learners = progress
            .learners
            .into_iter()
            .filter(|(m, _)| !absent.contains(m))
            .map(|(id, (seq, file))| LearnerEntry { id, seq, file })
            .collect();
        let manifest = Manifest {
            snapshot,
            config_hash: self.cfg.replay_hash(),
            syncer_seq,
            syncer,
            learners,
            absent: absent.to_vec(),
            in_flight: in_flight.to_vec(),
        };
        if let Err(err) = store.write_manifest(&manifest) {
            warn!("snapshot {snapshot}: writing manifest failed: {err}");
        }
        self.progress.retain(|&id, _| id > snapshot);
    }

    /// Remembers the local step of a learner that crashed while outside the
    /// restored state, so its later recovery resumes the right step count.
    pub(crate) fn note_retired(&mut self, m: u16, t_m: u64) {
        self.retired.insert(m, t_m);
    }

    /// Replaces run state with a snapshot's contents, for resuming.
    pub(crate) fn restore(
        &mut self,
        syncer: SyncerState,
        learners: Vec<LearnerState>,
        rounds: Vec<GlobalFragment>,
        transfers: Vec<Transfer>,
        retired: BTreeMap<u16, u64>,
    ) {
        self.syncer = syncer;
        self.learners = learners.into_iter().map(|l| (l.id, l)).collect();
        self.rounds = rounds.into_iter().map(|g| (g.round, g)).collect();
        self.transfers.clear();
        for t in transfers {
            let keep = self.transfers.get(&t.newcomer).map_or(true, |old| old.seq < t.seq);
            if keep {
                self.transfers.insert(t.newcomer, t);
            }
        }
        self.retired = retired;
        for m in self.learners.keys() {
            self.retired.remove(m);
        }
        self.pulls.clear();
        self.recovered.clear();
    }
}
