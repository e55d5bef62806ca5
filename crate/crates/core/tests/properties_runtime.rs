//! Property tests for the scheduler, the tape and snapshots.

use std::collections::BTreeMap;

use proptest::prelude::*;

use ddl_core::causality::{replay, EventPayload, Tape, WorkerId};
use ddl_core::chaos::{SpeedClass, SpeedModel};
use ddl_core::config::ExperimentConfig;
use ddl_core::runtime::{simulate, Simulator};

#[derive(Debug, Clone)]
struct Shape {
    learners: usize,
    quorum: usize,
    cycle: usize,
    fragments: usize,
    overlap: u64,
    steps: u64,
    two_class: bool,
    grace: bool,
    seed: u64,
}

fn shapes() -> impl Strategy<Value = Shape> {
    (1usize..6, 1usize..6, prop_oneof![Just(2usize), Just(3), Just(4), Just(6)], 1usize..7, 0u64..4, 12u64..40, any::<bool>(), any::<bool>(), 0u64..1000)
        .prop_filter_map("quorum and fragments must fit", |(m, k, h, p, tau, steps, two, grace, seed)| {
            (k <= m && p <= h).then_some(Shape {
                learners: m,
                quorum: k,
                cycle: h,
                fragments: p,
                overlap: tau,
                steps,
                two_class: two,
                grace,
                seed,
            })
        })
}

fn config(s: &Shape) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = s.seed;
    let rt = &mut cfg.runtime;
    rt.learners = s.learners;
    rt.quorum = s.quorum;
    rt.cycle = s.cycle;
    rt.fragments = s.fragments;
    rt.overlap = s.overlap;
    rt.steps = s.steps;
    if s.two_class {
        rt.speed = SpeedModel::two_class();
    }
    cfg.grace.enabled = s.grace && s.overlap > 0;
    cfg
}

fn chaotic(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.runtime.step_time = 30.0;
    cfg.chaos.enabled = true;
    cfg.chaos.model.n_chip = 600_000.0;
    cfg.chaos.crash_mtbf = 400.0;
    cfg.chaos.restart_delay = 30.0;
    cfg
}

/// Checks the vector-clock facts every tape must satisfy.
fn clocks_are_causal(tape: &Tape) -> Result<(), TestCaseError> {
    tape.check_causality().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut last: BTreeMap<WorkerId, &ddl_core::causality::TapeEvent> = BTreeMap::new();
    let mut closes = BTreeMap::new();
    for (i, e) in tape.events.iter().enumerate() {
        if i > 0 {
            prop_assert!(tape.events[i - 1].seq < e.seq);
        }
        if let Some(prev) = last.get(&e.worker) {
            prop_assert!(prev.local_step <= e.local_step, "{:?} local step went back at seq {}", e.worker, e.seq);
            // A crash wipes a learner's clock along with its state.
            if !matches!(prev.payload, EventPayload::Failure { crash: true, .. }) {
                prop_assert!(prev.vclock.le(&e.vclock), "{:?} clock went back at seq {}", e.worker, e.seq);
            }
        }
        last.insert(e.worker, e);
        match &e.payload {
            EventPayload::QuorumClose { step, .. } => {
                closes.insert(*step, &e.vclock);
            }
            EventPayload::FragmentApply { round, .. } => {
                let close = closes.get(round).expect("check_causality saw the close");
                prop_assert!(close.le(&e.vclock), "apply of round {round} at seq {} does not dominate its close", e.seq);
            }
            _ => {}
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn tapes_are_causal_without_chaos(s in shapes()) {
        let out = simulate(&config(&s), None).unwrap();
        clocks_are_causal(&out.tape)?;
        prop_assert_eq!(out.report.rounds, s.steps);
    }

    #[test]
    fn tapes_are_causal_under_chaos(s in shapes()) {
        let out = simulate(&chaotic(config(&s)), None).unwrap();
        clocks_are_causal(&out.tape)?;
    }

    #[test]
    fn fragments_are_never_too_stale(s in shapes()) {
        let out = simulate(&config(&s), None).unwrap();
        let bound = s.cycle as u64 + s.overlap;
        prop_assert!(out.executor.metrics.max_staleness <= bound, "staleness {} > {bound}", out.executor.metrics.max_staleness);
    }

    #[test]
    fn at_most_two_fragments_in_flight(s in shapes()) {
        let mut cfg = config(&s);
        cfg.runtime.overlap = 2;
        cfg.runtime.fragments = s.cycle;
        let out = simulate(&cfg, None).unwrap();
        prop_assert!(out.report.max_in_flight <= 2, "{} in flight", out.report.max_in_flight);
    }

    #[test]
    fn grace_never_lowers_admission(m in 2usize..9, k_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.runtime.learners = m;
        cfg.runtime.quorum = 1 + ((m - 1) as f64 * k_frac) as usize;
        cfg.runtime.steps = 120;
        cfg.runtime.speed = SpeedModel::two_class();
        cfg.grace.enabled = true;
        let with = simulate(&cfg, None).unwrap().report.mean_admitted();
        cfg.grace.enabled = false;
        let without = simulate(&cfg, None).unwrap().report.mean_admitted();
        prop_assert!(with >= without, "{with} < {without}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn replay_reproduces_random_runs(s in shapes(), chaos in any::<bool>()) {
        let mut cfg = config(&s);
        cfg.runtime.steps = s.steps.min(24);
        if chaos {
            cfg = chaotic(cfg);
        }
        let task = cfg.task.build().unwrap();
        let out = simulate(&cfg, Some(task.clone())).unwrap();
        let again = replay(&out.tape, &cfg, Some(task)).unwrap();
        prop_assert_eq!(again.checksums(), out.checksums());
    }
}

#[test]
fn a_suppressed_learner_does_not_stall_the_rest() {
    for m in [2usize, 3] {
        let mut cfg = ExperimentConfig::default();
        cfg.runtime.learners = m;
        cfg.runtime.quorum = 1;
        cfg.runtime.steps = 60;
        // Only learner 1 is in the slow class.
        cfg.runtime.speed = SpeedModel { class: SpeedClass::TwoClass, gap: 1000.0, jitter: 0.0 };
        let r = simulate(&cfg, None).unwrap().report;
        assert_eq!(r.rounds, 60);
        let nominal = r.virtual_time / cfg.runtime.step_time;
        // Every healthy learner may have one step still running at the end.
        let floor = (m - 1) as f64 * (nominal - 1.0);
        assert!(r.learner_steps as f64 >= floor, "M={m}: {} steps in {nominal:.1} step times", r.learner_steps);
    }
}

fn snapshot_config(dir: &std::path::Path, seed: u64) -> ExperimentConfig {
    let mut cfg = chaotic(ExperimentConfig::default());
    cfg.seed = seed;
    cfg.runtime.learners = 4;
    cfg.runtime.quorum = 2;
    cfg.runtime.steps = 96;
    cfg.chaos.crash_mtbf = 1500.0;
    cfg.snapshot.interval = 12;
    cfg.snapshot.dir = Some(dir.to_path_buf());
    cfg
}

#[test]
fn snapshots_are_consistent_cuts() {
    for seed in 0..4 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = snapshot_config(dir.path(), seed);
        let out = simulate(&cfg, None).unwrap();
        let events = &out.tape.events;
        let mut finished = 0;
        for end in events.iter().filter(|e| e.worker == WorkerId::Syncer) {
            let EventPayload::SnapshotEnd { snapshot, in_flight, .. } = &end.payload else { continue };
            finished += 1;
            let begin = events
                .iter()
                .find(|e| e.worker == WorkerId::Syncer && matches!(e.payload, EventPayload::SnapshotBegin { snapshot: s, .. } if s == *snapshot))
                .expect("snapshot began");
            let cuts: BTreeMap<u16, _> = events
                .iter()
                .filter_map(|e| match (&e.payload, e.worker) {
                    (EventPayload::SnapshotBegin { snapshot: s, .. }, WorkerId::Learner(m)) if s == snapshot => Some((m, e)),
                    _ => None,
                })
                .collect();
            for (m, cut) in &cuts {
                assert_eq!(cut.vclock.get(WorkerId::Syncer), *snapshot, "seed {seed}: L{m} cut for {snapshot}");
            }
            for f in in_flight {
                let cut = cuts.get(&f.learner).expect("in-flight sender checkpointed");
                // Sent inside the learner's cut...
                assert!(f.t_m <= cut.local_step, "seed {seed}: L{} sent t_m {} after its cut", f.learner, f.t_m);
                // ...and received after the syncer's.
                let recv = events.iter().find(|e| {
                    e.worker == WorkerId::Syncer
                        && e.seq > begin.seq
                        && matches!(e.payload, EventPayload::MetadataRecv { t_m, .. } if t_m == f.t_m)
                });
                assert!(recv.is_some_and(|r| r.seq <= end.seq), "seed {seed}: no receipt of L{} t_m {}", f.learner, f.t_m);
            }
        }
        assert!(finished >= 4, "seed {seed}: only {finished} snapshots finished");
    }
}

#[test]
fn snapshots_do_not_slow_learners() {
    let steps = |tape: &Tape| -> Vec<(WorkerId, u64, u64)> {
        tape.events
            .iter()
            .filter(|e| matches!(e.payload, EventPayload::Step { .. }))
            .map(|e| (e.worker, e.local_step, e.time.to_bits()))
            .collect()
    };
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = snapshot_config(dir.path(), seed);
        let with = Simulator::new(&cfg, None).unwrap().run().unwrap();
        assert!(!with.report.snapshots.is_empty());
        let mut plain = cfg.clone();
        plain.snapshot.interval = 0;
        plain.snapshot.dir = None;
        let without = Simulator::new(&plain, None).unwrap().run().unwrap();
        assert_eq!(steps(&with.tape), steps(&without.tape), "seed {seed}");
    }
}
