//! Statistical checks of the failure model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ddl_core::chaos::{chaos_table, ChaosConfig, ClusterState, TABLE_CHIPS, TABLE_LEARNERS};

fn arrivals(cfg: ChaosConfig, count: usize, seed: u64) -> Vec<f64> {
    let cluster = ClusterState::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut now = 0.0;
    while out.len() < count {
        out.extend(cluster.draw_failure_times(now, cfg.step_time, &mut rng));
        now += cfg.step_time;
    }
    out
}

#[test]
fn failure_gaps_are_exponential() {
    for (seed, n_chip) in [(0, 150_000.0), (1, 600_000.0), (2, 2_400_000.0)] {
        let cfg = ChaosConfig { n_chip, ..ChaosConfig::default() };
        let times = arrivals(cfg, 4001, seed);
        let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(f64::total_cmp);
        let n = gaps.len() as f64;
        let mtbf = cfg.mtbf();
        let d = gaps
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-x / mtbf).exp();
                (f - i as f64 / n).max((i + 1) as f64 / n - f)
            })
            .fold(0.0, f64::max);
        let critical = 1.628 / n.sqrt();
        assert!(d < critical, "n_chip {n_chip}: KS statistic {d:.4} >= {critical:.4}");
    }
}

#[test]
fn failure_count_matches_the_rate() {
    let cfg = ChaosConfig::default();
    let cluster = ClusterState::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let windows = 20_000_000u64;
    let mut count = 0usize;
    for w in 0..windows {
        count += cluster.draw_failure_times(w as f64 * cfg.step_time, cfg.step_time, &mut rng).len();
    }
    let expected = windows as f64 * cfg.step_time / cfg.mtbf();
    let rel = (count as f64 - expected).abs() / expected;
    assert!(rel <= 0.02, "{count} failures vs {expected:.0} expected");
}

#[test]
fn goodput_trends() {
    let rows = chaos_table(&ChaosConfig::default(), &TABLE_LEARNERS, &TABLE_CHIPS, 100_000, 3);
    let cell = |m: usize, n: f64| rows.iter().find(|r| r.learners == Some(m) && r.n_chip == n).unwrap();
    for &m in &TABLE_LEARNERS {
        for w in TABLE_CHIPS.windows(2) {
            let (a, b) = (cell(m, w[0]).goodput, cell(m, w[1]).goodput);
            assert!(b <= a, "M={m}: goodput rises from {a:.4} to {b:.4} as chips grow to {}", w[1]);
        }
    }
    for &n in &TABLE_CHIPS {
        for w in TABLE_LEARNERS.windows(2) {
            let (a, b) = (cell(w[0], n).goodput, cell(w[1], n).goodput);
            assert!(b >= a, "N={n}: goodput falls from {a:.4} to {b:.4} going to M={}", w[1]);
        }
    }
    for r in &rows {
        let m = r.learners.map_or(1, |m| m);
        let g = ddl_core::chaos::simulate_goodput(
            &ChaosConfig { n_chip: r.n_chip, elastic: r.learners.is_some(), learners: m, ..ChaosConfig::default() },
            2_000,
            3,
        );
        assert!(g.useful_slice_time <= g.allocated_slice_time && g.stepping_time <= g.wall_time);
    }
}
