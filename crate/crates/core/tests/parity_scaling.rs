//! Decoupled vs data-parallel final loss as the training budget grows.
//!
//! Expensive and, on the small MLP task, dominated by seed noise (the median
//! gap moves by about two points between budgets), so it only runs on request:
//! `cargo test --release --test parity_scaling -- --ignored`.

use ddl_core::config::ExperimentConfig;
use ddl_core::harness::experiments::{run_decoupled, run_dp};

const BUDGETS: [u64; 3] = [300, 600, 1200];
const SEEDS: std::ops::RangeInclusive<u64> = 1..=5;

fn median_gap(steps: u64) -> f64 {
    let mut gaps: Vec<f64> = SEEDS
        .map(|seed| {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            cfg.task.init_seed = seed;
            cfg.task.dataset_seed = seed;
            cfg.runtime.steps = steps;
            let task = cfg.task.build().unwrap();
            let dp = run_dp(&cfg, task.clone()).unwrap().final_loss;
            let dec = run_decoupled(&cfg, task, None).unwrap().0.final_loss;
            (dec - dp) / dp
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2]
}

#[test]
#[ignore = "slow; noise-dominated at this model size"]
fn gap_does_not_grow_with_budget() {
    let gaps: Vec<f64> = BUDGETS.iter().map(|&s| median_gap(s)).collect();
    eprintln!("median relative gaps at {BUDGETS:?} steps: {gaps:?}");
    for w in gaps.windows(2) {
        assert!(w[1] <= w[0], "median gap grew: {gaps:?}");
    }
}
