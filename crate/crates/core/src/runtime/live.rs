//! Threaded execution: one thread per learner plus the syncer, talking only
//! over FIFO channels.
//!
//! Learner threads own their state and report every event to the syncer on
//! the same channel as their messages, so the syncer records a tape whose
//! per-learner order matches what each learner actually did. Replaying that
//! tape deterministically reproduces the final parameters.
//!
//! Chaos, crashes, joins and snapshots are evaluated only by the
//! deterministic scheduler.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};

use crate::causality::{EventPayload, Tape, TapeRecorder, VectorClock, WorkerId};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::tasks::Task;

use super::executor::Executor;
use super::learner::{LearnerState, Metadata};
use super::sim::tape_header;
use super::syncer::{grace_window, Ema, SyncerState};
use super::transport::{Body, Message, PulledFragment};

/// Learners missing for this many step-time estimates are treated as absent.
const STALL_FACTOR: f64 = 10.0;

enum Up {
    Event { m: u16, local_step: u64, vclock: VectorClock, payload: EventPayload },
    Msg(Message),
    Done { m: u16, state: Box<LearnerState> },
    Failed { m: u16, error: String },
}

#[derive(Debug, Clone)]
pub struct LiveOutcome {
    pub tape: Tape,
    pub learners: Vec<LearnerState>,
    pub syncer: SyncerState,
    /// Learners admitted with positive weight, per merged round.
    pub admitted: Vec<usize>,
    pub learner_steps: u64,
    pub wall_seconds: f64,
}

impl LiveOutcome {
    pub fn checksums(&self) -> BTreeMap<WorkerId, u64> {
        let mut out: BTreeMap<WorkerId, u64> =
            self.learners.iter().map(|l| (WorkerId::Learner(l.id), l.checksum())).collect();
        out.insert(WorkerId::Syncer, self.syncer.checksum());
        out
    }
}

pub struct LiveRunner {
    cfg: ExperimentConfig,
    task: Option<Arc<dyn Task>>,
    time_scale: f64,
}

impl LiveRunner {
    pub fn new(cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.chaos.enabled || cfg.chaos.crash_mtbf > 0.0 {
            return Err(Error::config("chaos.enabled", "chaos runs only in deterministic mode"));
        }
        if !cfg.recovery.join.is_empty() {
            return Err(Error::config("recovery.join", "joins run only in deterministic mode"));
        }
        if cfg.snapshot.interval > 0 {
            return Err(Error::config("snapshot.interval", "snapshots run only in deterministic mode"));
        }
        Ok(LiveRunner { cfg: cfg.clone(), task, time_scale: 0.0 })
    }

    /// Each learner sleeps `time_scale` wall seconds per virtual second of
    /// step time, so the speed model shapes the live schedule. 0 runs flat out.
    pub fn time_scale(mut self, scale: f64) -> Self {
        self.time_scale = scale.max(0.0);
        self
    }

    pub fn run(self) -> Result<LiveOutcome> {
        let rec = TapeRecorder::new(tape_header(&self.cfg));
        self.run_with(rec)
    }

    /// Streams the tape to `path` while running.
    pub fn run_streaming(self, path: &Path) -> Result<LiveOutcome> {
        let rec = TapeRecorder::streaming(tape_header(&self.cfg), path)?;
        self.run_with(rec)
    }

    fn run_with(self, rec: TapeRecorder) -> Result<LiveOutcome> {
        let exec = Executor::new(&self.cfg, self.task.clone())?;
        let (up_tx, up_rx) = unbounded();
        let mut downs = BTreeMap::new();
        let mut handles = Vec::new();
        for (&m, state) in exec.learners() {
            let (tx, rx) = unbounded();
            downs.insert(m, tx);
            let worker = LearnerWorker {
                cfg: self.cfg.clone(),
                task: self.task.clone(),
                plan: exec.plan().clone(),
                state: state.clone(),
                up: up_tx.clone(),
                down: rx,
                time_scale: self.time_scale,
                outstanding: BTreeSet::new(),
                await_pull: false,
            };
            let h = thread::Builder::new().name(format!("learner-{m}")).spawn(move || worker.run())?;
            handles.push(h);
        }
        drop(up_tx);
        let syncer = SyncerWorker::new(self.cfg, exec, rec, up_rx, downs);
        let out = syncer.run();
        for h in handles {
            if h.join().is_err() {
                warn!("a learner thread panicked");
            }
        }
        out
    }
}

/// Runs `cfg` on threads and returns the recorded outcome.
pub fn run_live(cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<LiveOutcome> {
    LiveRunner::new(cfg, task)?.run()
}

struct LearnerWorker {
    cfg: ExperimentConfig,
    task: Option<Arc<dyn Task>>,
    plan: crate::fragmentation::FragmentPlan,
    state: LearnerState,
    up: Sender<Up>,
    down: Receiver<Message>,
    time_scale: f64,
    outstanding: BTreeSet<u64>,
    await_pull: bool,
}

impl LearnerWorker {
    fn run(mut self) {
        let m = self.state.id;
        match self.serve() {
            Ok(()) => {
                let _ = self.up.send(Up::Done { m, state: Box::new(self.state) });
            }
            Err(e) => {
                let _ = self.up.send(Up::Failed { m, error: e.to_string() });
            }
        }
    }

    fn event(&self, payload: EventPayload) -> Result<()> {
        let e = Up::Event {
            m: self.state.id,
            local_step: self.state.t_m,
            vclock: self.state.vclock.clone(),
            payload,
        };
        self.up.send(e).map_err(|_| Error::InvalidArgument("syncer hung up".into()))
    }

    fn message(&self, body: Body) -> Result<()> {
        let msg = Message { sender: WorkerId::Learner(self.state.id), vclock: self.state.vclock.clone(), body };
        self.up.send(Up::Msg(msg)).map_err(|_| Error::InvalidArgument("syncer hung up".into()))
    }

    /// Handles one syncer message; returns false on stop.
    fn receive(&mut self, msg: Message) -> Result<bool> {
        self.state.vclock.merge(&msg.vclock);
        match msg.body {
            Body::Global(g) => {
                let alpha = self.cfg.optim.alpha;
                self.state.apply(&self.plan, &g, alpha)?;
                self.outstanding.remove(&g.round);
                self.event(EventPayload::FragmentApply { round: g.round, fragment: g.fragment })?;
            }
            Body::PullRequest { round, fragment } => {
                self.event(EventPayload::FragmentPull { step: round, fragment })?;
                self.outstanding.insert(round);
                self.await_pull = false;
                let p = fragment as usize;
                let pulled = PulledFragment {
                    learner: self.state.id,
                    round,
                    fragment,
                    t_m: self.state.t_m,
                    counter: self.state.counters[p],
                    version: self.state.versions[p],
                    values: self.state.fragment(&self.plan, p)?,
                };
                self.message(Body::Payload(pulled))?;
            }
            Body::Stop => return Ok(false),
            _ => {}
        }
        Ok(true)
    }

    fn serve(&mut self) -> Result<()> {
        let tokens = self.cfg.task.batch as u64 * self.cfg.task.dim as u64;
        let blocking = self.cfg.runtime.overlap == 0;
        let (speed, step_time, seed) = (self.cfg.runtime.speed, self.cfg.runtime.step_time, self.cfg.seed);
        loop {
            if self.time_scale > 0.0 {
                let d = speed.step_duration(step_time, seed, self.state.id, self.state.t_m + 1);
                thread::sleep(Duration::from_secs_f64(d * self.time_scale));
            }
            self.state.step(self.task.as_deref(), tokens)?;
            self.event(EventPayload::Step { tokens })?;
            let meta: Metadata = self.state.metadata();
            let mut sent_known = meta.t_known;
            self.await_pull |= blocking && self.plan.due(meta.t_m).is_some();
            self.message(Body::Metadata(meta))?;

            while let Ok(msg) = self.down.try_recv() {
                if !self.receive(msg)? {
                    return Ok(());
                }
            }
            // A blocking learner waits until a pull after its due step has
            // come back as a global fragment.
            while blocking && (self.await_pull || !self.outstanding.is_empty()) {
                let Ok(msg) = self.down.recv() else {
                    return Ok(());
                };
                if !self.receive(msg)? {
                    return Ok(());
                }
                if self.state.t_known > sent_known && (self.await_pull || !self.outstanding.is_empty()) {
                    sent_known = self.state.t_known;
                    self.message(Body::Metadata(self.state.metadata()))?;
                }
            }
        }
    }
}

struct SyncerWorker {
    cfg: ExperimentConfig,
    exec: Executor,
    rec: TapeRecorder,
    up: Receiver<Up>,
    downs: BTreeMap<u16, Sender<Message>>,
    started: Instant,

    t: u64,
    vclock: VectorClock,
    meta: BTreeMap<u16, Metadata>,
    last_meta: BTreeMap<u16, Instant>,
    consumed: BTreeMap<u16, u64>,
    broadcasts: Vec<u64>,
    payloads: BTreeSet<u16>,
    done: BTreeMap<u16, LearnerState>,
    ema_step: Ema,
    ema_quorum: Ema,
    ema_sync: Ema,
    admitted: Vec<usize>,
    learner_steps: u64,
}

impl SyncerWorker {
    fn new(
        cfg: ExperimentConfig,
        exec: Executor,
        rec: TapeRecorder,
        up: Receiver<Up>,
        downs: BTreeMap<u16, Sender<Message>>,
    ) -> Self {
        SyncerWorker {
            cfg,
            exec,
            rec,
            up,
            downs,
            started: Instant::now(),
            t: 0,
            vclock: VectorClock::new(),
            meta: BTreeMap::new(),
            last_meta: BTreeMap::new(),
            consumed: BTreeMap::new(),
            broadcasts: Vec::new(),
            payloads: BTreeSet::new(),
            done: BTreeMap::new(),
            ema_step: Ema::default(),
            ema_quorum: Ema::default(),
            ema_sync: Ema::default(),
            admitted: Vec::new(),
            learner_steps: 0,
        }
    }

    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn record(&mut self, worker: WorkerId, local_step: u64, vclock: VectorClock, payload: EventPayload) -> Result<()> {
        let time = self.now();
        let e = self.rec.record(worker, local_step, time, vclock, payload)?;
        if worker == WorkerId::Syncer {
            self.exec.handle(e)?;
        }
        Ok(())
    }

    fn send(&self, m: u16, body: Body) {
        let msg = Message { sender: WorkerId::Syncer, vclock: self.vclock.clone(), body };
        if let Some(tx) = self.downs.get(&m) {
            if tx.send(msg).is_err() {
                debug!("L{m} is gone; message dropped");
            }
        }
    }

    fn receive(&mut self, up: Up) -> Result<()> {
        match up {
            Up::Event { m, local_step, vclock, payload } => {
                if matches!(payload, EventPayload::Step { .. }) {
                    self.learner_steps += 1;
                }
                self.record(WorkerId::Learner(m), local_step, vclock, payload)
            }
            Up::Msg(msg) => {
                let WorkerId::Learner(m) = msg.sender else {
                    return Ok(());
                };
                self.vclock.merge(&msg.vclock);
                match msg.body {
                    Body::Metadata(md) => {
                        let now = Instant::now();
                        if let Some(prev) = self.last_meta.insert(m, now) {
                            self.ema_step.update(self.cfg.grace.ema_decay, (now - prev).as_secs_f64());
                        }
                        self.meta.insert(m, md);
                    }
                    Body::Payload(pf) => {
                        if pf.round == self.t {
                            self.payloads.insert(m);
                            self.exec.insert_pull(pf);
                        }
                    }
                    _ => {}
                }
                Ok(())
            }
            Up::Done { m, state } => {
                self.done.insert(m, *state);
                Ok(())
            }
            Up::Failed { m, error } => Err(Error::InvalidArgument(format!("learner L{m} failed: {error}"))),
        }
    }

    /// Waits for the next learner report, at most until `deadline`.
    fn pump(&mut self, deadline: Option<Instant>) -> Result<bool> {
        let got = match deadline {
            Some(d) => match self.up.recv_deadline(d) {
                Ok(u) => Some(u),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::InvalidArgument("all learners hung up".into()))
                }
            },
            None => Some(self.up.recv().map_err(|_| Error::InvalidArgument("all learners hung up".into()))?),
        };
        match got {
            Some(u) => {
                self.receive(u)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

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
            .filter(|(m, md)| md.t_m > self.consumed.get(m).copied().unwrap_or(0) && md.t_known >= need)
            .map(|(&m, _)| m)
            .collect()
    }

    /// Learners that reported recently enough to be waited for.
    fn present(&self) -> usize {
        if !self.ema_step.is_set() {
            return self.downs.len();
        }
        let horizon = Duration::from_secs_f64(STALL_FACTOR * self.ema_step.get());
        let now = Instant::now();
        self.downs.keys().filter(|m| self.last_meta.get(m).map_or(true, |&at| now - at <= horizon)).count()
    }

    fn run(mut self) -> Result<LiveOutcome> {
        let result = self.rounds();
        for &m in self.downs.keys() {
            self.send(m, Body::Stop);
        }
        // Keep recording until every learner has handed back its final state.
        while self.done.len() < self.downs.len() {
            match self.up.recv() {
                Ok(u) => {
                    if let Err(e) = self.receive(u) {
                        warn!("{e}");
                        if result.is_ok() {
                            return Err(e);
                        }
                    }
                }
                Err(_) => break,
            }
        }
        result?;
        let wall_seconds = self.now();
        let tape = self.rec.finish()?;
        let learners = self.done.into_values().collect();
        Ok(LiveOutcome {
            tape,
            learners,
            syncer: self.exec.syncer().clone(),
            admitted: self.admitted,
            learner_steps: self.learner_steps,
            wall_seconds,
        })
    }

    fn rounds(&mut self) -> Result<()> {
        let quorum = self.cfg.runtime.quorum;
        let blocking = self.cfg.runtime.overlap == 0;
        for t in 1..=self.cfg.runtime.steps {
            self.t = t;
            self.vclock.observe(WorkerId::Syncer, t);
            let opened = Instant::now();
            while self.eligible().len() < quorum {
                self.pump(None)?;
            }
            self.ema_quorum.update(self.cfg.grace.ema_decay, opened.elapsed().as_secs_f64());
            if self.cfg.grace.enabled && !blocking {
                let g = grace_window(
                    &self.cfg.grace,
                    self.ema_step.get(),
                    self.ema_quorum.get(),
                    self.ema_sync.get(),
                    self.cfg.runtime.overlap,
                );
                let deadline = Instant::now() + Duration::from_secs_f64(g);
                while self.eligible().len() < self.present() && self.pump(Some(deadline))? {}
            }

            let admitted = self.eligible();
            let due = self.exec.plan().due(t);
            if due.is_some() || !blocking {
                for &m in &admitted {
                    self.consumed.insert(m, self.meta[&m].t_m);
                }
            }
            let vc = self.vclock.clone();
            let Some(p) = due else {
                let close = EventPayload::QuorumClose { step: t, fragment: None, admitted: vec![] };
                self.record(WorkerId::Syncer, t, vc, close)?;
                continue;
            };
            let fragment = p as u32;
            let pulling = Instant::now();
            self.payloads.clear();
            for &m in &admitted {
                self.send(m, Body::PullRequest { round: t, fragment });
            }
            while admitted.iter().any(|m| !self.payloads.contains(m)) {
                self.pump(None)?;
            }
            let admissions = self.exec.admissions(t, &admitted)?;
            self.admitted.push(admissions.iter().filter(|a| a.weight > 0.0).count());
            let vc = self.vclock.clone();
            let close = EventPayload::QuorumClose { step: t, fragment: Some(fragment), admitted: admissions };
            self.record(WorkerId::Syncer, t, vc, close)?;
            let g = self.exec.round(t).cloned().expect("round just merged");
            for &m in self.downs.keys() {
                self.send(m, Body::Global(g.clone()));
            }
            self.ema_sync.update(self.cfg.grace.ema_decay, pulling.elapsed().as_secs_f64());
            self.broadcasts.push(t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causality::replay;

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.runtime.steps = 30;
        c.runtime.learners = 3;
        c.runtime.quorum = 2;
        c
    }

    #[test]
    fn replay_reproduces_live_run() {
        let c = cfg();
        let task = c.task.build().unwrap();
        let out = run_live(&c, Some(task.clone())).unwrap();
        assert_eq!(out.learners.len(), 3);
        assert_eq!(out.syncer.t, 30);
        out.tape.check_causality().unwrap();
        let exec = replay(&out.tape, &c, Some(task)).unwrap();
        assert_eq!(exec.checksums(), out.checksums());
    }

    #[test]
    fn blocking_with_a_partial_quorum_finishes() {
        let mut c = cfg();
        c.runtime.learners = 5;
        c.runtime.quorum = 4;
        c.runtime.cycle = 2;
        c.runtime.fragments = 1;
        c.runtime.overlap = 0;
        c.runtime.speed = crate::chaos::SpeedModel::two_class();
        let task = c.task.build().unwrap();
        let out = LiveRunner::new(&c, Some(task.clone())).unwrap().time_scale(1e-4).run().unwrap();
        assert_eq!(out.syncer.t, 30);
        let exec = replay(&out.tape, &c, Some(task)).unwrap();
        assert_eq!(exec.checksums(), out.checksums());
    }

    #[test]
    fn chaos_is_rejected() {
        let mut c = cfg();
        c.chaos.enabled = true;
        assert!(matches!(LiveRunner::new(&c, None), Err(Error::Config { .. })));
    }
}
