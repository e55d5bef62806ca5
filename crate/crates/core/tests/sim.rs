use ddl_core::causality::{replay, EventPayload, WorkerId};
use ddl_core::config::ExperimentConfig;
use ddl_core::runtime::simulate;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.runtime.steps = 48;
    cfg
}

#[test]
fn record_then_replay_matches() {
    let cfg = small();
    let task = cfg.task.build().unwrap();
    let out = simulate(&cfg, Some(task.clone())).unwrap();
    assert_eq!(out.report.rounds, 48);
    let again = replay(&out.tape, &cfg, Some(task)).unwrap();
    assert_eq!(again.checksums(), out.checksums());
    eprintln!("{:?}", out.report);
}

#[test]
fn homogeneous_no_chaos_admits_everyone() {
    let cfg = small();
    let out = simulate(&cfg, None).unwrap();
    assert!(out.report.admitted.iter().all(|&a| a == cfg.runtime.learners), "{:?}", out.report.admitted);
    let closes = out.tape.events.iter().filter(|e| matches!(e.payload, EventPayload::QuorumClose { .. })).count();
    assert_eq!(closes, 48);
    assert!(out.tape.events.iter().any(|e| e.worker == WorkerId::Learner(3)));
}
