//! Deterministic discrete-event scheduler for learners and the syncer.
//!
//! All protocol decisions (quorum, grace, pulls, chaos, crashes, recovery,
//! snapshots) are made here in virtual time. Every decision is written to the
//! tape and immediately applied through [`Executor::handle`], so replaying the
//! tape performs the same arithmetic in the same order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::PathBuf;
use std::sync::Arc;

use log::debug;
use ordered_float::OrderedFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::causality::{EventPayload, InFlight, Tape, TapeHeader, TapeRecorder, VectorClock, WorkerId};
use crate::chaos::{ClusterState, GoodputMeter};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::tasks::Task;
use crate::resilience::recovery::{select_peer, transfer_time, within_budget};
use crate::rng;

use super::executor::Executor;
use super::learner::Metadata;
use super::syncer::{grace_window, Ema};
use super::transport::{Body, FifoClock, LinkModel, Message};

/// What a simulated run observed, beyond the tape itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub virtual_time: f64,
    pub rounds: u64,
    pub goodput: GoodputMeter,
    /// Learners whose fragments were merged, per round that carried a fragment.
    pub admitted: Vec<usize>,
    /// Grace window chosen at each quorum.
    pub grace: Vec<f64>,
    /// Time learners spent blocked waiting for the syncer.
    pub learner_idle_time: f64,
    /// Largest number of fragments one learner had sent but not yet received back.
    pub max_in_flight: usize,
    pub snapshots: Vec<u64>,
    pub recoveries: usize,
    pub recovery_aborts: usize,
    pub crashes: usize,
    pub slice_failures: usize,
    pub learner_steps: u64,
}

impl SimReport {
    pub fn mean_admitted(&self) -> f64 {
        if self.admitted.is_empty() {
            0.0
        } else {
            self.admitted.iter().sum::<usize>() as f64 / self.admitted.len() as f64
        }
    }
}

pub struct RunOutcome {
    pub tape: Tape,
    pub executor: Executor,
    pub report: SimReport,
}

impl RunOutcome {
    pub fn checksums(&self) -> BTreeMap<WorkerId, u64> {
        self.executor.checksums()
    }
}

pub fn tape_header(cfg: &ExperimentConfig) -> TapeHeader {
    TapeHeader {
        config_hash: cfg.replay_hash(),
        seed: cfg.seed,
        learners: cfg.runtime.learners,
        quorum: cfg.runtime.quorum,
        cycle: cfg.runtime.cycle,
        fragments: cfg.runtime.fragments,
        overlap: cfg.runtime.overlap,
        config: cfg.canonical_text(),
    }
}

#[derive(Debug)]
enum Ev {
    Deliver { to: WorkerId, msg: Box<Message> },
    ChaosWindow(u64),
    SliceFailure,
    SliceReturn,
    Crash(u16, u64),
    Restart(u16),
    Join(usize),
    GraceEnd(u64),
    StallEnd(u16, u64),
    TickEnd(u16, u64),
    Check,
    Drain(u16, u64),
}

impl Ev {
    /// Tie-break among simultaneous events: deliveries first, then chaos,
    /// timers, step completions, quorum checks and finally learner drains.
    fn class(&self) -> u8 {
        match self {
            Ev::Deliver { .. } => 0,
            Ev::ChaosWindow(_)
            | Ev::SliceFailure
            | Ev::SliceReturn
            | Ev::Crash(..)
            | Ev::Restart(_)
            | Ev::Join(_) => 1,
            Ev::GraceEnd(_) | Ev::StallEnd(..) => 2,
            Ev::TickEnd(..) => 3,
            Ev::Check => 4,
            Ev::Drain(..) => 5,
        }
    }
}

struct Scheduled {
    time: f64,
    class: u8,
    seq: u64,
    ev: Ev,
}

impl Scheduled {
    fn key(&self) -> (OrderedFloat<f64>, u8, u64) {
        (OrderedFloat(self.time), self.class, self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Stepping { start: f64, tokens: u64, slices: usize },
    Blocked { since: f64 },
    Stalled,
    Waiting,
    Down,
    Joining { t_s: Option<u64>, peer: Option<u16>, buffer: Vec<u64> },
}

struct LearnerSim {
    status: Status,
    epoch: u64,
    stall_pending: bool,
    inbox: Vec<u64>,
    vc: VectorClock,
    last_checkpoint: Option<u64>,
    serves: Vec<(u16, u64)>,
    outstanding: BTreeSet<u64>,
    /// Blocking mode: set after a due step until the next pull reaches the learner.
    await_pull: bool,
    /// `t_known` carried by the last metadata message.
    sent_known: u64,
    crash_epoch: u64,
}

impl LearnerSim {
    fn new(status: Status) -> Self {
        LearnerSim {
            status,
            epoch: 0,
            stall_pending: false,
            inbox: Vec::new(),
            vc: VectorClock::new(),
            last_checkpoint: None,
            serves: Vec::new(),
            outstanding: BTreeSet::new(),
            await_pull: false,
            sent_known: 0,
            crash_epoch: 0,
        }
    }

    fn healthy(&self) -> bool {
        !matches!(self.status, Status::Down | Status::Joining { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Quorum,
    Grace,
    Pulling { fragment: u32, waiting: BTreeSet<u16>, admitted: Vec<u16>, started: f64 },
    Done,
}

struct ActiveSnapshot {
    id: u64,
    expected: BTreeSet<u16>,
    returned: BTreeSet<u16>,
    absent: BTreeSet<u16>,
    in_flight: Vec<InFlight>,
}

/// Builder and state for one simulated run.
pub struct Simulator {
    cfg: ExperimentConfig,
    exec: Executor,
    rec: TapeRecorder,
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
    now: f64,

    link: LinkModel,
    links: BTreeMap<(WorkerId, WorkerId), FifoClock>,
    learners: BTreeMap<u16, LearnerSim>,
    tpe: u64,
    params: usize,

    // Syncer.
    t: u64,
    phase: Phase,
    syncer_vc: VectorClock,
    meta: BTreeMap<u16, Metadata>,
    last_meta: BTreeMap<u16, f64>,
    consumed: BTreeMap<u16, u64>,
    broadcasts: Vec<u64>,
    opened_at: f64,
    check_pending: bool,
    ema_step: Ema,
    ema_quorum: Ema,
    ema_sync: Ema,
    snapshot: Option<ActiveSnapshot>,

    // Chaos.
    cluster: Option<ClusterState>,
    chaos_rng: ChaCha8Rng,
    crash_rng: ChaCha8Rng,
    stepping: usize,
    last_time: f64,
    nominal: usize,
    provisioned: usize,

    report: SimReport,
}

impl Simulator {
    pub fn new(cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<Self> {
        cfg.validate()?;
        let exec = Executor::new(cfg, task)?;
        let rec = TapeRecorder::new(tape_header(cfg));
        Self::with_parts(cfg, exec, rec)
    }

    /// Streams the tape to `path` as it is recorded.
    pub fn streaming(cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>, path: &std::path::Path) -> Result<Self> {
        cfg.validate()?;
        let exec = Executor::new(cfg, task)?;
        let rec = TapeRecorder::streaming(tape_header(cfg), path)?;
        Self::with_parts(cfg, exec, rec)
    }

    fn with_parts(cfg: &ExperimentConfig, exec: Executor, rec: TapeRecorder) -> Result<Self> {
        let m0 = cfg.runtime.learners as u16;
        let cluster = cfg.chaos.enabled.then(|| ClusterState::new(cfg.chaos_model()));
        let cluster_nominal = cluster.as_ref().map_or(1, |c| c.nominal_slices());
        let learners = (0..m0).map(|m| (m, LearnerSim::new(Status::Waiting))).collect();
        Ok(Simulator {
            cfg: cfg.clone(),
            exec,
            rec,
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0.0,
            link: LinkModel { latency: cfg.runtime.latency, bandwidth: cfg.runtime.bandwidth },
            links: BTreeMap::new(),
            learners,
            tpe: cfg.task.dim as u64,
            params: cfg.task.layout().len(),
            t: 0,
            phase: Phase::Quorum,
            syncer_vc: VectorClock::new(),
            meta: BTreeMap::new(),
            last_meta: BTreeMap::new(),
            consumed: BTreeMap::new(),
            broadcasts: Vec::new(),
            opened_at: 0.0,
            check_pending: false,
            ema_step: Ema::default(),
            ema_quorum: Ema::default(),
            ema_sync: Ema::default(),
            snapshot: None,
            cluster,
            chaos_rng: rng::stream(cfg.seed, "chaos", 0),
            crash_rng: rng::stream(cfg.seed, "crash", 0),
            stepping: 0,
            last_time: 0.0,
            nominal: cluster_nominal,
            provisioned: cfg.runtime.learners,
            report: SimReport::default(),
        })
    }

    /// Records per-event parameter checksums in the executor.
    pub fn with_trace(mut self) -> Self {
        self.exec = self.exec.with_trace();
        self
    }

    pub fn snapshot_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.exec.set_snapshot_store(dir);
        self
    }

    fn blocking(&self) -> bool {
        self.cfg.runtime.overlap == 0
    }

    fn schedule(&mut self, time: f64, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, class: ev.class(), seq, ev });
    }

    fn record(&mut self, worker: WorkerId, payload: EventPayload) -> Result<()> {
        let (local_step, vclock) = match worker {
            WorkerId::Learner(m) => {
                let step = self.exec.learner_step(m) + u64::from(matches!(payload, EventPayload::Step { .. }));
                let l = self.learners.get_mut(&m).expect("known learner");
                if matches!(payload, EventPayload::Step { .. }) {
                    l.vc.observe(worker, step);
                }
                (step, l.vc.clone())
            }
            WorkerId::Syncer => (self.t, self.syncer_vc.clone()),
        };
        let e = self.rec.record(worker, local_step, self.now, vclock, payload)?;
        self.exec.handle(e)
    }

    fn send(&mut self, from: WorkerId, to: WorkerId, body: Body, bits: f64, extra_delay: f64) -> f64 {
        let vclock = match from {
            WorkerId::Learner(m) => self.learners[&m].vc.clone(),
            WorkerId::Syncer => self.syncer_vc.clone(),
        };
        let delay = self.link.delay(bits) + extra_delay;
        let at = self.links.entry((from, to)).or_default().deliver_at(self.now, delay);
        self.schedule(at, Ev::Deliver { to, msg: Box::new(Message { sender: from, vclock, body }) });
        delay
    }

    fn fragment_bits(&self, p: usize) -> f64 {
        self.exec.plan().fragment_len(p) as f64 * 64.0
    }

    fn request_check(&mut self) {
        if !self.check_pending && self.phase != Phase::Done {
            self.check_pending = true;
            self.schedule(self.now, Ev::Check);
        }
    }

    fn advance_clock(&mut self, to: f64) {
        let dt = to - self.last_time;
        if dt > 0.0 {
            if self.stepping > 0 {
                self.report.goodput.stepping_time += dt;
            }
            self.report.goodput.allocated_slice_time += (self.nominal * self.provisioned) as f64 * dt;
            self.last_time = to;
        }
    }

    pub fn run(mut self) -> Result<RunOutcome> {
        let m0 = self.cfg.runtime.learners as u16;
        for m in 0..m0 {
            self.start_step(m)?;
            self.arm_crash(m);
        }
        if self.cluster.is_some() {
            self.schedule(0.0, Ev::ChaosWindow(0));
        }
        for (i, &at) in self.cfg.recovery.join.clone().iter().enumerate() {
            self.schedule(at, Ev::Join(i));
        }
        self.open_round(1)?;

        while self.phase != Phase::Done {
            let Some(s) = self.heap.pop() else {
                return Err(Error::InvalidArgument(format!("simulation deadlocked at round {}", self.t)));
            };
            self.advance_clock(s.time);
            self.now = s.time;
            self.dispatch(s.ev)?;
        }

        let wall = self.now;
        self.report.virtual_time = wall;
        self.report.rounds = self.t;
        self.report.goodput.wall_time = wall;
        let tape = self.rec.finish()?;
        Ok(RunOutcome { tape, executor: self.exec, report: self.report })
    }

    fn dispatch(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::Deliver { to, msg } => match to {
                WorkerId::Syncer => self.syncer_receive(*msg),
                WorkerId::Learner(m) => self.learner_receive(m, *msg),
            },
            Ev::ChaosWindow(i) => self.chaos_window(i),
            Ev::SliceFailure => self.slice_failure(),
            Ev::SliceReturn => self.slice_return(),
            Ev::Crash(m, e) => self.crash(m, e),
            Ev::Restart(m) => {
                self.learners.get_mut(&m).expect("known learner").status =
                    Status::Joining { t_s: None, peer: None, buffer: Vec::new() };
                Ok(())
            }
            Ev::Join(i) => {
                let m = (self.cfg.runtime.learners + i) as u16;
                let status = Status::Joining { t_s: None, peer: None, buffer: Vec::new() };
                self.learners.insert(m, LearnerSim::new(status));
                self.provisioned += 1;
                Ok(())
            }
            Ev::GraceEnd(round) => {
                if self.t == round && self.phase == Phase::Grace {
                    self.close_round()?;
                }
                Ok(())
            }
            Ev::StallEnd(m, e) => {
                if self.learners[&m].epoch == e && self.learners[&m].status == Status::Stalled {
                    self.drain(m)?;
                }
                Ok(())
            }
            Ev::TickEnd(m, e) => self.tick_end(m, e),
            Ev::Check => {
                self.check_pending = false;
                self.check_quorum()
            }
            Ev::Drain(m, e) => {
                if self.learners[&m].epoch == e {
                    self.drain(m)?;
                }
                Ok(())
            }
        }
    }

    // ---- learners ----

    fn up_slices(&self, m: u16) -> (usize, usize) {
        match &self.cluster {
            Some(c) if (m as usize) < self.cfg.runtime.learners && c.config().elastic => {
                (c.up_slices(m as usize), c.nominal_slices())
            }
            Some(c) => (c.nominal_slices(), c.nominal_slices()),
            None => (1, 1),
        }
    }

    fn set_stepping(&mut self, m: u16, on: bool) {
        let was = matches!(self.learners[&m].status, Status::Stepping { .. });
        match (was, on) {
            (false, true) => self.stepping += 1,
            (true, false) => self.stepping -= 1,
            _ => {}
        }
    }

    fn start_step(&mut self, m: u16) -> Result<()> {
        let (up, nominal) = self.up_slices(m);
        if up == 0 {
            self.set_stepping(m, false);
            self.learners.get_mut(&m).expect("known learner").status = Status::Waiting;
            return Ok(());
        }
        let batch = self.cfg.task.batch as f64;
        let examples = ((batch * up as f64 / nominal as f64).round() as u64).max(1);
        let tokens = examples * self.tpe;
        let next = self.exec.learner_step(m) + 1;
        let rt = &self.cfg.runtime;
        let duration = rt.speed.step_duration(rt.step_time, self.cfg.seed, m, next);
        self.set_stepping(m, true);
        let l = self.learners.get_mut(&m).expect("known learner");
        l.epoch += 1;
        l.status = Status::Stepping { start: self.now, tokens, slices: up };
        let e = l.epoch;
        self.schedule(self.now + duration, Ev::TickEnd(m, e));
        Ok(())
    }

    fn tick_end(&mut self, m: u16, e: u64) -> Result<()> {
        let l = &self.learners[&m];
        if l.epoch != e {
            return Ok(());
        }
        let Status::Stepping { start, tokens, slices } = l.status else {
            return Ok(());
        };
        self.record(WorkerId::Learner(m), EventPayload::Step { tokens })?;
        self.report.learner_steps += 1;
        self.report.goodput.useful_slice_time += (self.now - start) * slices as f64;
        self.set_stepping(m, false);
        let meta = self.exec.learner(m).expect("stepping learner exists").metadata();
        let due = self.blocking() && self.exec.plan().due(meta.t_m).is_some();
        let l = self.learners.get_mut(&m).expect("known learner");
        l.status = Status::Blocked { since: self.now };
        l.await_pull |= due;
        l.sent_known = meta.t_known;
        self.send(WorkerId::Learner(m), WorkerId::Syncer, Body::Metadata(meta), 0.0, 0.0);
        self.schedule(self.now, Ev::Drain(m, e));
        Ok(())
    }

    /// Applies received global fragments, serves recovery requests, then
    /// either pauses (chaos reconfiguration, blocking mode) or starts the next step.
    fn drain(&mut self, m: u16) -> Result<()> {
        let inbox = std::mem::take(&mut self.learners.get_mut(&m).expect("known learner").inbox);
        for round in inbox {
            self.apply_round(m, round)?;
        }
        self.serve_pending(m)?;

        let since = match self.learners[&m].status {
            Status::Blocked { since } => Some(since),
            _ => None,
        };
        if self.learners[&m].stall_pending {
            let down = self.cluster.as_ref().map_or(0.0, |c| c.config().downscale_time);
            let l = self.learners.get_mut(&m).expect("known learner");
            l.stall_pending = false;
            l.status = Status::Stalled;
            let e = l.epoch;
            self.schedule(self.now + down, Ev::StallEnd(m, e));
            return Ok(());
        }
        if self.blocking() {
            let l = &self.learners[&m];
            if l.await_pull || !l.outstanding.is_empty() {
                let known = self.exec.learner(m).expect("healthy learner exists").t_known;
                let resend = known > l.sent_known;
                let l = self.learners.get_mut(&m).expect("known learner");
                if since.is_none() {
                    l.status = Status::Blocked { since: self.now };
                }
                // Keep the syncer's view fresh so the learner stays eligible.
                if resend {
                    l.sent_known = known;
                    let meta = self.exec.learner(m).expect("healthy learner exists").metadata();
                    self.send(WorkerId::Learner(m), WorkerId::Syncer, Body::Metadata(meta), 0.0, 0.0);
                }
                return Ok(());
            }
        }
        if let Some(since) = since {
            self.report.learner_idle_time += self.now - since;
        }
        self.start_step(m)
    }

    fn apply_round(&mut self, m: u16, round: u64) -> Result<()> {
        let fragment = self
            .exec
            .round(round)
            .map(|g| g.fragment)
            .ok_or_else(|| Error::InvalidArgument(format!("round {round} was never merged")))?;
        self.record(WorkerId::Learner(m), EventPayload::FragmentApply { round, fragment })?;
        self.learners.get_mut(&m).expect("known learner").outstanding.remove(&round);
        Ok(())
    }

    /// Checkpoints for the active snapshot on the first syncer message that
    /// carries its marker.
    fn observe_syncer(&mut self, m: u16, vc: &VectorClock) -> Result<()> {
        let l = self.learners.get_mut(&m).expect("known learner");
        l.vc.merge(vc);
        let Some(snap) = &self.snapshot else {
            return Ok(());
        };
        let id = snap.id;
        let l = &self.learners[&m];
        if !l.healthy() || vc.get(WorkerId::Syncer) < id || l.last_checkpoint.is_some_and(|c| c >= id) {
            return Ok(());
        }
        let pending = l.inbox.clone();
        self.learners.get_mut(&m).expect("known learner").last_checkpoint = Some(id);
        self.record(WorkerId::Learner(m), EventPayload::SnapshotBegin { snapshot: id, pending })
    }

    fn learner_receive(&mut self, m: u16, msg: Message) -> Result<()> {
        if self.learners[&m].status == Status::Down {
            return Ok(());
        }
        if msg.sender == WorkerId::Syncer {
            self.observe_syncer(m, &msg.vclock)?;
        } else {
            self.learners.get_mut(&m).expect("known learner").vc.merge(&msg.vclock);
        }
        match msg.body {
            Body::Global(g) => {
                let l = self.learners.get_mut(&m).expect("known learner");
                let first = match &mut l.status {
                    Status::Joining { t_s, buffer, .. } => {
                        buffer.push(g.round);
                        t_s.is_none().then(|| *t_s = Some(g.round)).is_some()
                    }
                    _ => {
                        l.inbox.push(g.round);
                        if let Status::Blocked { .. } = l.status {
                            let e = l.epoch;
                            self.schedule(self.now, Ev::Drain(m, e));
                        }
                        return Ok(());
                    }
                };
                if first {
                    let healthy = self.learners.iter().filter(|(_, l)| l.healthy()).map(|(&id, _)| id);
                    let p = select_peer(healthy)?;
                    if let Status::Joining { peer, .. } = &mut self.learners.get_mut(&m).expect("known").status {
                        *peer = Some(p);
                    }
                    let body = Body::RecoveryRequest { t_s: g.round };
                    self.send(WorkerId::Learner(m), WorkerId::Learner(p), body, 0.0, 0.0);
                }
                Ok(())
            }
            Body::PullRequest { round, fragment } => {
                if !self.learners[&m].healthy() {
                    return Ok(());
                }
                self.record(WorkerId::Learner(m), EventPayload::FragmentPull { step: round, fragment })?;
                let l = self.learners.get_mut(&m).expect("known learner");
                l.outstanding.insert(round);
                l.await_pull = false;
                self.report.max_in_flight = self.report.max_in_flight.max(l.outstanding.len());
                let pulled = self.exec.pulled(round, m).cloned().expect("pull was just captured");
                let bits = self.fragment_bits(fragment as usize);
                self.send(WorkerId::Learner(m), WorkerId::Syncer, Body::Payload(pulled), bits, 0.0);
                Ok(())
            }
            Body::RecoveryRequest { t_s } => {
                let WorkerId::Learner(newcomer) = msg.sender else {
                    return Ok(());
                };
                if !self.learners[&m].healthy() {
                    self.reset_join(newcomer);
                    return Ok(());
                }
                self.learners.get_mut(&m).expect("known learner").serves.push((newcomer, t_s));
                self.serve_pending(m)
            }
            Body::RecoveryPayload { t_s, peer_known, .. } => {
                let WorkerId::Learner(peer) = msg.sender else {
                    return Ok(());
                };
                self.finish_recovery(m, peer, t_s, peer_known)
            }
            Body::Metadata(_) | Body::Payload(_) | Body::Stop => Ok(()),
        }
    }

    fn serve_pending(&mut self, m: u16) -> Result<()> {
        if !self.learners[&m].healthy() {
            return Ok(());
        }
        let known = self.exec.learner(m).map_or(0, |l| l.t_known);
        let (ready, waiting): (Vec<_>, Vec<_>) =
            self.learners[&m].serves.iter().partition(|&&(_, t_s)| known >= t_s);
        self.learners.get_mut(&m).expect("known learner").serves = waiting;
        for (newcomer, t_s) in ready {
            self.record(WorkerId::Learner(m), EventPayload::RecoveryServe { newcomer, t_s })?;
            let extra = transfer_time(self.params, self.cfg.recovery.bandwidth, 0.0);
            let body = Body::RecoveryPayload { t_s, peer_known: known, state: None };
            self.send(WorkerId::Learner(m), WorkerId::Learner(newcomer), body, 0.0, extra);
        }
        Ok(())
    }

    fn reset_join(&mut self, m: u16) {
        if let Some(l) = self.learners.get_mut(&m) {
            if let Status::Joining { .. } = l.status {
                l.status = Status::Joining { t_s: None, peer: None, buffer: Vec::new() };
            }
        }
    }

    fn finish_recovery(&mut self, m: u16, peer: u16, t_s: u64, peer_known: u64) -> Result<()> {
        let Status::Joining { t_s: Some(want), peer: Some(asked), buffer } = &self.learners[&m].status else {
            return Ok(());
        };
        if *want != t_s || *asked != peer {
            return Ok(());
        }
        let buffer = buffer.clone();
        let newest = buffer.iter().copied().max().unwrap_or(t_s);
        if !within_budget(newest, t_s, self.cfg.runtime.cycle as u64) {
            self.record(WorkerId::Learner(m), EventPayload::RecoveryAbort { peer, t_s })?;
            self.report.recovery_aborts += 1;
            self.reset_join(m);
            return Ok(());
        }
        self.record(WorkerId::Learner(m), EventPayload::Recovery { peer, t_s })?;
        self.report.recoveries += 1;
        {
            let l = self.learners.get_mut(&m).expect("known learner");
            l.status = Status::Waiting;
            l.inbox.clear();
            l.outstanding.clear();
            l.await_pull = false;
            l.stall_pending = false;
        }
        let mut rounds = buffer;
        rounds.sort_unstable();
        for r in rounds.into_iter().filter(|&r| r > peer_known) {
            self.apply_round(m, r)?;
        }
        debug!("L{m} recovered from L{peer} at t_s={t_s}");
        self.arm_crash(m);
        self.start_step(m)
    }

    // ---- chaos ----

    fn chaos_window(&mut self, i: u64) -> Result<()> {
        let dt = self.cfg.runtime.step_time;
        let cluster = self.cluster.as_ref().expect("chaos enabled");
        for ft in cluster.draw_failure_times(self.now, dt, &mut self.chaos_rng) {
            self.schedule(ft, Ev::SliceFailure);
        }
        self.schedule((i + 1) as f64 * dt, Ev::ChaosWindow(i + 1));
        Ok(())
    }

    fn slice_failure(&mut self) -> Result<()> {
        let cluster = self.cluster.as_mut().expect("chaos enabled");
        let elastic = cluster.config().elastic;
        let nominal = cluster.nominal_slices();
        let (down, up) = (cluster.config().downscale_time, cluster.config().upscale_time);
        let m = if elastic {
            let Some(f) = cluster.fail_random_slice(self.now, &mut self.chaos_rng) else {
                return Ok(());
            };
            self.schedule(f.returns_at, Ev::SliceReturn);
            f.learner as u16
        } else {
            self.chaos_rng.gen_range(0..self.cfg.runtime.learners) as u16
        };
        self.report.slice_failures += 1;
        if !self.learners[&m].healthy() {
            return Ok(());
        }
        let up_slices = if elastic { self.cluster.as_ref().expect("chaos").up_slices(m as usize) } else { nominal };
        self.record(WorkerId::Learner(m), EventPayload::Failure { crash: false, up_slices: up_slices as u32 })?;
        let Status::Stepping { start, tokens, slices } = self.learners[&m].status else {
            return Ok(());
        };
        if elastic {
            if up_slices == 0 {
                self.abort_step(m, Status::Waiting);
            } else {
                let l = self.learners.get_mut(&m).expect("known learner");
                l.status = Status::Stepping { start, tokens, slices: slices.saturating_sub(1) };
                l.stall_pending = true;
            }
        } else {
            self.abort_step(m, Status::Stalled);
            let e = self.learners[&m].epoch;
            self.schedule(self.now + down + up, Ev::StallEnd(m, e));
        }
        Ok(())
    }

    fn abort_step(&mut self, m: u16, next: Status) {
        self.set_stepping(m, false);
        let l = self.learners.get_mut(&m).expect("known learner");
        l.epoch += 1;
        l.status = next;
    }

    fn slice_return(&mut self) -> Result<()> {
        let returned = self.cluster.as_mut().expect("chaos enabled").process_returns(self.now);
        for (_, m) in returned {
            let m = m as u16;
            if self.learners[&m].status == Status::Waiting && self.exec.learner(m).is_some() {
                self.drain(m)?;
            }
        }
        Ok(())
    }

    fn arm_crash(&mut self, m: u16) {
        let mtbf = self.cfg.chaos.crash_mtbf;
        if !(self.cfg.chaos.enabled && mtbf > 0.0) {
            return;
        }
        let dt = Exp::new(1.0 / mtbf).expect("positive rate").sample(&mut self.crash_rng);
        let l = self.learners.get_mut(&m).expect("known learner");
        l.crash_epoch += 1;
        let e = l.crash_epoch;
        self.schedule(self.now + dt, Ev::Crash(m, e));
    }

    fn crash(&mut self, m: u16, e: u64) -> Result<()> {
        if self.learners[&m].crash_epoch != e || !self.learners[&m].healthy() {
            return Ok(());
        }
        let others = self.learners.iter().filter(|(&id, l)| id != m && l.healthy()).count();
        if others == 0 {
            self.arm_crash(m);
            return Ok(());
        }
        self.record(WorkerId::Learner(m), EventPayload::Failure { crash: true, up_slices: 0 })?;
        self.report.crashes += 1;
        self.set_stepping(m, false);
        let waiting_on_me: Vec<u16> = self
            .learners
            .iter()
            .filter(|(_, l)| matches!(l.status, Status::Joining { peer: Some(p), .. } if p == m))
            .map(|(&id, _)| id)
            .collect();
        {
            let l = self.learners.get_mut(&m).expect("known learner");
            l.epoch += 1;
            l.status = Status::Down;
            l.inbox.clear();
            l.outstanding.clear();
            l.await_pull = false;
            l.serves.clear();
            l.stall_pending = false;
        }
        for n in waiting_on_me {
            self.reset_join(n);
        }
        self.meta.remove(&m);
        self.last_meta.remove(&m);
        let mut complete = false;
        if let Phase::Pulling { waiting, admitted, .. } = &mut self.phase {
            admitted.retain(|&a| a != m);
            complete = waiting.remove(&m) && waiting.is_empty();
        }
        if complete {
            self.finish_round()?;
        }
        if let Some(s) = self.snapshot.as_mut() {
            if s.expected.contains(&m) && !s.returned.contains(&m) {
                s.absent.insert(m);
            }
        }
        self.maybe_end_snapshot()?;
        self.schedule(self.now + self.cfg.chaos.restart_delay, Ev::Restart(m));
        self.request_check();
        Ok(())
    }

    // ---- syncer ----

    /// Latest broadcast round not after `x` (0 when none).
    fn last_broadcast(&self, x: u64) -> u64 {
        let i = self.broadcasts.partition_point(|&r| r <= x);
        if i == 0 {
            0
        } else {
            self.broadcasts[i - 1]
        }
    }

    fn eligible(&self) -> Vec<u16> {
        let tau = self.cfg.runtime.overlap.max(1);
        let need = self.last_broadcast(self.t.saturating_sub(tau));
        self.meta
            .iter()
            .filter(|(m, md)| {
                self.learners[m].healthy()
                    && md.t_m > self.consumed.get(m).copied().unwrap_or(0)
                    && md.t_known >= need
            })
            .map(|(&m, _)| m)
            .collect()
    }

    fn healthy_count(&self) -> usize {
        self.learners.values().filter(|l| l.healthy()).count()
    }

    fn open_round(&mut self, t: u64) -> Result<()> {
        self.t = t;
        self.syncer_vc.observe(WorkerId::Syncer, t);
        self.opened_at = self.now;
        self.phase = Phase::Quorum;
        let interval = self.cfg.snapshot.interval;
        if interval > 0 && t % interval == 0 && self.snapshot.is_none() {
            let expected = self.learners.iter().filter(|(_, l)| l.healthy()).map(|(&m, _)| m).collect();
            self.record(WorkerId::Syncer, EventPayload::SnapshotBegin { snapshot: t, pending: Vec::new() })?;
            self.snapshot = Some(ActiveSnapshot {
                id: t,
                expected,
                returned: BTreeSet::new(),
                absent: BTreeSet::new(),
                in_flight: Vec::new(),
            });
        }
        self.request_check();
        Ok(())
    }

    fn check_quorum(&mut self) -> Result<()> {
        match self.phase {
            Phase::Quorum => {
                let eligible = self.eligible();
                // Learners known to be down cannot count toward the quorum.
                let quorum = self.cfg.runtime.quorum.min(self.healthy_count()).max(1);
                if eligible.len() < quorum {
                    return Ok(());
                }
                self.ema_quorum.update(self.cfg.grace.ema_decay, self.now - self.opened_at);
                let grace = if self.cfg.grace.enabled && !self.blocking() {
                    let g = grace_window(
                        &self.cfg.grace,
                        self.ema_step.get(),
                        self.ema_quorum.get(),
                        self.ema_sync.get(),
                        self.cfg.runtime.overlap,
                    );
                    self.report.grace.push(g);
                    g
                } else {
                    0.0
                };
                if grace <= 0.0 || eligible.len() == self.healthy_count() {
                    self.close_round()
                } else {
                    self.phase = Phase::Grace;
                    self.schedule(self.now + grace, Ev::GraceEnd(self.t));
                    Ok(())
                }
            }
            Phase::Grace if self.eligible().len() == self.healthy_count() => self.close_round(),
            _ => Ok(()),
        }
    }

    fn close_round(&mut self) -> Result<()> {
        let admitted = self.eligible();
        let due = self.exec.plan().due(self.t);
        // A blocked learner can only make fresh metadata after it is pulled,
        // so in blocking mode only pulls consume it.
        if due.is_some() || !self.blocking() {
            for &m in &admitted {
                self.consumed.insert(m, self.meta[&m].t_m);
            }
        }
        let Some(p) = due else {
            self.record(WorkerId::Syncer, EventPayload::QuorumClose { step: self.t, fragment: None, admitted: vec![] })?;
            return self.next_round();
        };
        let fragment = p as u32;
        self.phase = Phase::Pulling {
            fragment,
            waiting: admitted.iter().copied().collect(),
            admitted: admitted.clone(),
            started: self.now,
        };
        if admitted.is_empty() {
            return self.finish_round();
        }
        for m in admitted {
            let body = Body::PullRequest { round: self.t, fragment };
            self.send(WorkerId::Syncer, WorkerId::Learner(m), body, 0.0, 0.0);
        }
        Ok(())
    }

    fn finish_round(&mut self) -> Result<()> {
        let Phase::Pulling { fragment, admitted, started, .. } = std::mem::replace(&mut self.phase, Phase::Quorum)
        else {
            return Ok(());
        };
        let admissions = self.exec.admissions(self.t, &admitted)?;
        self.report.admitted.push(admissions.iter().filter(|a| a.weight > 0.0).count());
        let event = EventPayload::QuorumClose { step: self.t, fragment: Some(fragment), admitted: admissions };
        self.record(WorkerId::Syncer, event)?;

        let g = self.exec.round(self.t).cloned().expect("round just merged");
        let bits = self.fragment_bits(fragment as usize);
        let targets: Vec<u16> =
            self.learners.iter().filter(|(_, l)| l.status != Status::Down).map(|(&m, _)| m).collect();
        let mut delay = self.link.delay(bits);
        for m in targets {
            delay = self.send(WorkerId::Syncer, WorkerId::Learner(m), Body::Global(g.clone()), bits, 0.0);
        }
        self.ema_sync.update(self.cfg.grace.ema_decay, self.now - started + delay);
        self.broadcasts.push(self.t);
        self.next_round()
    }

    fn next_round(&mut self) -> Result<()> {
        if self.t >= self.cfg.runtime.steps {
            self.phase = Phase::Done;
            return Ok(());
        }
        self.open_round(self.t + 1)
    }

    fn syncer_receive(&mut self, msg: Message) -> Result<()> {
        let WorkerId::Learner(m) = msg.sender else {
            return Ok(());
        };
        self.syncer_vc.merge(&msg.vclock);
        if !self.learners[&m].healthy() {
            return Ok(());
        }
        if let Some(s) = self.snapshot.as_mut() {
            if msg.vclock.get(WorkerId::Syncer) >= s.id {
                if s.expected.contains(&m) {
                    s.returned.insert(m);
                }
            } else if s.expected.contains(&m) && !s.returned.contains(&m) {
                if let Body::Metadata(md) = &msg.body {
                    s.in_flight.push(InFlight { learner: m, t_m: md.t_m, t_known: md.t_known });
                }
            }
        }
        match msg.body {
            Body::Metadata(md) => {
                let event = EventPayload::MetadataRecv { t_m: md.t_m, t_known: md.t_known };
                self.record(WorkerId::Syncer, event)?;
                if let Some(prev) = self.last_meta.insert(m, self.now) {
                    self.ema_step.update(self.cfg.grace.ema_decay, self.now - prev);
                }
                self.meta.insert(m, md);
                self.request_check();
            }
            Body::Payload(pf) => {
                let complete = match &mut self.phase {
                    Phase::Pulling { waiting, .. } => pf.round == self.t && waiting.remove(&m) && waiting.is_empty(),
                    _ => false,
                };
                if complete {
                    self.finish_round()?;
                }
            }
            _ => {}
        }
        self.maybe_end_snapshot()
    }

    fn maybe_end_snapshot(&mut self) -> Result<()> {
        let Some(s) = &self.snapshot else {
            return Ok(());
        };
        if !s.expected.iter().all(|m| s.returned.contains(m) || s.absent.contains(m)) {
            return Ok(());
        }
        let s = self.snapshot.take().expect("checked above");
        let event = EventPayload::SnapshotEnd {
            snapshot: s.id,
            absent: s.absent.into_iter().collect(),
            in_flight: s.in_flight,
        };
        self.record(WorkerId::Syncer, event)?;
        self.report.snapshots.push(s.id);
        Ok(())
    }
}

/// Runs the simulator to completion.
pub fn simulate(cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<RunOutcome> {
    Simulator::new(cfg, task)?.run()
}
