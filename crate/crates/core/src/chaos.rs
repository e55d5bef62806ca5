//! Failure model: chips grouped into slices, Poisson interruptions, repair
//! delays, elastic reconfiguration costs and goodput accounting.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const YEAR_SECONDS: f64 = 31_536_000.0;

pub fn cluster_mtbf(mtbi_chip: f64, n_chip: f64) -> f64 {
    mtbi_chip / n_chip
}

/// Exponentiated Weibull: `F(x) = (1 - exp(-(x/lambda)^k))^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpWeibull {
    pub alpha: f64,
    pub k: f64,
    pub lambda: f64,
}

impl ExpWeibull {
    pub fn from_median(alpha: f64, k: f64, median: f64) -> Self {
        let lambda = median / (-(1.0 - 0.5f64.powf(1.0 / alpha)).ln()).powf(1.0 / k);
        ExpWeibull { alpha, k, lambda }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        (1.0 - (-(x / self.lambda).powf(self.k)).exp()).powf(self.alpha)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        self.lambda * (-(1.0 - u.powf(1.0 / self.alpha)).ln()).powf(1.0 / self.k)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.gen::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedClass {
    Homogeneous,
    /// Odd-numbered learners are slower by `gap` (fractional).
    TwoClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedModel {
    pub class: SpeedClass,
    pub gap: f64,
    pub jitter: f64,
}

impl Default for SpeedModel {
    fn default() -> Self {
        SpeedModel { class: SpeedClass::Homogeneous, gap: 0.18, jitter: 0.0 }
    }
}

impl SpeedModel {
    pub fn two_class() -> Self {
        SpeedModel { class: SpeedClass::TwoClass, gap: 0.18, jitter: 0.10 }
    }

    pub fn multiplier(&self, learner: u16) -> f64 {
        match self.class {
            SpeedClass::Homogeneous => 1.0,
            SpeedClass::TwoClass if learner % 2 == 1 => 1.0 + self.gap,
            SpeedClass::TwoClass => 1.0,
        }
    }

    /// Duration of learner `m`'s step number `step`.
    pub fn step_duration(&self, base: f64, seed: u64, learner: u16, step: u64) -> f64 {
        let mut d = base * self.multiplier(learner);
        if self.jitter > 0.0 {
            let u: f64 = rng::stream_at(seed, "speed", learner as u64, step).gen_range(-1.0..1.0);
            d *= 1.0 + self.jitter * u;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosConfig {
    pub mtbi_chip: f64,
    pub n_chip: f64,
    pub chips_per_slice: f64,
    pub learners: usize,
    pub downscale_time: f64,
    pub upscale_time: f64,
    pub repair: ExpWeibull,
    pub elastic: bool,
    /// Width of a failure-sampling window; also the nominal step time.
    pub step_time: f64,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        ChaosConfig {
            mtbi_chip: YEAR_SECONDS,
            n_chip: 150_000.0,
            chips_per_slice: 256.0,
            learners: 1,
            downscale_time: 30.0,
            upscale_time: 30.0,
            repair: ExpWeibull::from_median(2.0, 1.5, 600.0),
            elastic: true,
            step_time: 30.0,
        }
    }
}

impl ChaosConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("chaos.mtbi_chip", self.mtbi_chip),
            ("chaos.n_chip", self.n_chip),
            ("chaos.chips_per_slice", self.chips_per_slice),
            ("chaos.step_time", self.step_time),
            ("chaos.repair_alpha", self.repair.alpha),
            ("chaos.repair_k", self.repair.k),
            ("chaos.repair_lambda", self.repair.lambda),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(k, format!("must be positive, got {v}")));
            }
        }
        if self.downscale_time < 0.0 || self.upscale_time < 0.0 {
            return Err(Error::config("chaos.downscale_time", "reconfiguration times must be >= 0"));
        }
        if self.learners == 0 {
            return Err(Error::config("runtime.learners", "need at least one learner"));
        }
        Ok(())
    }

    pub fn mtbf(&self) -> f64 {
        cluster_mtbf(self.mtbi_chip, self.n_chip)
    }

    /// Slices per learner, rounded to the nearest whole slice (at least one).
    pub fn slices_per_learner(&self) -> usize {
        ((self.n_chip / (self.learners as f64 * self.chips_per_slice)).round() as usize).max(1)
    }

    pub fn with_learners(mut self, m: usize) -> Self {
        self.learners = m;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceFailure {
    pub learner: usize,
    pub time: f64,
    /// Time the slice rejoins its learner (repair plus upscale).
    pub returns_at: f64,
}

type Return = Reverse<(OrderedFloat<f64>, usize)>;

/// Per-learner slice availability with a pending-repair queue.
#[derive(Debug, Clone)]
pub struct ClusterState {
    cfg: ChaosConfig,
    nominal: usize,
    up: Vec<usize>,
    returns: BinaryHeap<Return>,
}

impl ClusterState {
    pub fn new(cfg: ChaosConfig) -> Self {
        let nominal = cfg.slices_per_learner();
        ClusterState { cfg, nominal, up: vec![nominal; cfg.learners], returns: BinaryHeap::new() }
    }

    pub fn config(&self) -> &ChaosConfig {
        &self.cfg
    }

    pub fn nominal_slices(&self) -> usize {
        self.nominal
    }

    pub fn up_slices(&self, m: usize) -> usize {
        self.up[m]
    }

    pub fn total_up(&self) -> usize {
        self.up.iter().sum()
    }

    pub fn effective_batch_scale(&self, m: usize) -> f64 {
        self.up[m] as f64 / self.nominal as f64
    }

    /// Failure instants in `[now, now + dt)`: a Poisson count with uniform offsets.
    pub fn draw_failure_times<R: Rng>(&self, now: f64, dt: f64, rng: &mut R) -> Vec<f64> {
        let lambda = dt / self.cfg.mtbf();
        if !(lambda > 0.0) {
            return Vec::new();
        }
        let n = Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0);
        let mut times: Vec<f64> = (0..n).map(|_| now + rng.gen::<f64>() * dt).collect();
        times.sort_by(f64::total_cmp);
        times
    }

    /// Picks a uniformly random up slice and takes it down at `time`.
    pub fn fail_random_slice<R: Rng>(&mut self, time: f64, rng: &mut R) -> Option<SliceFailure> {
        let total = self.total_up();
        if total == 0 {
            return None;
        }
        let mut r = rng.gen_range(0..total);
        let learner = self.up.iter().position(|&u| {
            if r < u {
                true
            } else {
                r -= u;
                false
            }
        })?;
        self.up[learner] -= 1;
        let returns_at = time + self.cfg.repair.sample(rng) + self.cfg.upscale_time;
        self.returns.push(Reverse((OrderedFloat(returns_at), learner)));
        Some(SliceFailure { learner, time, returns_at })
    }

    pub fn next_return(&self) -> Option<f64> {
        self.returns.peek().map(|Reverse((t, _))| t.0)
    }

    /// Brings back every slice whose return time is `<= now`.
    pub fn process_returns(&mut self, now: f64) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        while let Some(&Reverse((t, m))) = self.returns.peek() {
            if t.0 > now {
                break;
            }
            self.returns.pop();
            self.up[m] += 1;
            out.push((t.0, m));
        }
        out
    }

    /// Samples one window of failures, applying due returns before each failure.
    pub fn sample_failures<R: Rng>(&mut self, now: f64, dt: f64, rng: &mut R) -> Vec<SliceFailure> {
        let times = self.draw_failure_times(now, dt, rng);
        let mut out = Vec::with_capacity(times.len());
        for t in times {
            self.process_returns(t);
            if let Some(f) = self.fail_random_slice(t, rng) {
                out.push(f);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GoodputMeter {
    pub useful_slice_time: f64,
    pub allocated_slice_time: f64,
    pub stepping_time: f64,
    pub wall_time: f64,
}

impl GoodputMeter {
    pub fn goodput(&self) -> f64 {
        if self.allocated_slice_time > 0.0 {
            self.useful_slice_time / self.allocated_slice_time
        } else {
            0.0
        }
    }

    pub fn uptime(&self) -> f64 {
        if self.wall_time > 0.0 {
            self.stepping_time / self.wall_time
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Running { since: f64 },
    Stalled,
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Window(u64),
    Failure,
    Return,
    Boundary(usize, u64),
    StallEnd(usize, u64),
}

/// Event-driven goodput simulation over `steps` windows of `cfg.step_time`.
///
/// Elastic mode: a failed slice leaves its learner immediately; the learner
/// finishes the step in progress, then pauses `downscale_time` to reshard.
/// Failures during that pause are absorbed. Repaired slices rejoin after
/// `upscale_time` without pausing the learner. A learner with no slices waits.
///
/// Non-elastic mode: a failure discards the partial step and pauses the
/// learner for `downscale_time + upscale_time` while it restarts at full width.
pub fn simulate_goodput(cfg: &ChaosConfig, steps: u64, seed: u64) -> GoodputMeter {
    let dt = cfg.step_time;
    let horizon = steps as f64 * dt;
    let mut cluster = ClusterState::new(*cfg);
    let m_count = cfg.learners;
    let nominal = cluster.nominal_slices();
    let mut rng = rng::stream(seed, "chaos", 0);

    let mut phase = vec![Phase::Running { since: 0.0 }; m_count];
    let mut epoch = vec![0u64; m_count];
    let mut boundary_pending = vec![false; m_count];
    let mut heap: BinaryHeap<Reverse<(OrderedFloat<f64>, Ev)>> = BinaryHeap::new();
    heap.push(Reverse((OrderedFloat(0.0), Ev::Window(0))));

    let mut meter = GoodputMeter {
        allocated_slice_time: (nominal * m_count) as f64 * horizon,
        wall_time: horizon,
        ..Default::default()
    };
    let mut last = 0.0;
    let mut running = m_count;
    let mut running_up = nominal * m_count;

    let completed = |since: f64, now: f64| ((now - since) / dt).floor() * dt;

    while let Some(Reverse((OrderedFloat(t), ev))) = heap.pop() {
        let now = t.min(horizon);
        if cfg.elastic {
            meter.useful_slice_time += running_up as f64 * (now - last);
        }
        if running > 0 {
            meter.stepping_time += now - last;
        }
        last = now;
        if t >= horizon {
            break;
        }
        match ev {
            Ev::Window(i) => {
                for ft in cluster.draw_failure_times(t, dt, &mut rng) {
                    heap.push(Reverse((OrderedFloat(ft), Ev::Failure)));
                }
                heap.push(Reverse((OrderedFloat((i + 1) as f64 * dt), Ev::Window(i + 1))));
            }
            Ev::Failure if cfg.elastic => {
                let Some(f) = cluster.fail_random_slice(t, &mut rng) else { continue };
                let m = f.learner;
                heap.push(Reverse((OrderedFloat(f.returns_at), Ev::Return)));
                if let Phase::Running { since } = phase[m] {
                    running_up -= 1;
                    if cluster.up_slices(m) == 0 {
                        phase[m] = Phase::Waiting;
                        running -= 1;
                        boundary_pending[m] = false;
                        epoch[m] += 1;
                    } else if !boundary_pending[m] {
                        boundary_pending[m] = true;
                        let b = since + ((t - since) / dt).ceil() * dt;
                        heap.push(Reverse((OrderedFloat(b), Ev::Boundary(m, epoch[m]))));
                    }
                }
            }
            Ev::Failure => {
                // Spare capacity replaces the failed slice; only the learner stalls.
                let m = rng.gen_range(0..m_count);
                if let Phase::Running { since } = phase[m] {
                    meter.useful_slice_time += completed(since, t) * nominal as f64;
                    phase[m] = Phase::Stalled;
                    running -= 1;
                    epoch[m] += 1;
                    let end = t + cfg.downscale_time + cfg.upscale_time;
                    heap.push(Reverse((OrderedFloat(end), Ev::StallEnd(m, epoch[m]))));
                }
            }
            Ev::Return => {
                for (_, m) in cluster.process_returns(t) {
                    match phase[m] {
                        Phase::Running { .. } => running_up += 1,
                        Phase::Waiting => {
                            phase[m] = Phase::Running { since: t };
                            running += 1;
                            running_up += cluster.up_slices(m);
                        }
                        Phase::Stalled => {}
                    }
                }
            }
            Ev::Boundary(m, e) => {
                if e != epoch[m] || !boundary_pending[m] {
                    continue;
                }
                boundary_pending[m] = false;
                epoch[m] += 1;
                phase[m] = Phase::Stalled;
                running -= 1;
                running_up -= cluster.up_slices(m);
                heap.push(Reverse((OrderedFloat(t + cfg.downscale_time), Ev::StallEnd(m, epoch[m]))));
            }
            Ev::StallEnd(m, e) => {
                if e != epoch[m] {
                    continue;
                }
                if cfg.elastic && cluster.up_slices(m) == 0 {
                    phase[m] = Phase::Waiting;
                } else {
                    phase[m] = Phase::Running { since: t };
                    running += 1;
                    if cfg.elastic {
                        running_up += cluster.up_slices(m);
                    }
                }
            }
        }
    }
    if !cfg.elastic {
        for p in &phase {
            if let Phase::Running { since } = *p {
                meter.useful_slice_time += completed(since, horizon) * nominal as f64;
            }
        }
    }
    meter
}

/// The monolithic data-parallel job: one learner spanning the whole cluster.
pub fn dp_elastic_baseline(cfg: &ChaosConfig, steps: u64, seed: u64) -> GoodputMeter {
    simulate_goodput(&cfg.with_learners(1), steps, seed)
}

/// Downtime when a learner joins: data-parallel pays the full transfer of
/// three model copies, decoupled training hides up to `H` steps of it.
pub fn upsize_downtime(model_bytes: f64, bandwidth_bits: f64, step_time: f64, h: u64) -> (f64, f64) {
    let transfer = 3.0 * model_bytes * 8.0 / bandwidth_bits;
    (transfer, (transfer - h as f64 * step_time).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// `None` for the non-elastic monolith.
    pub learners: Option<usize>,
    pub n_chip: f64,
    pub mtbi_chip: f64,
    pub goodput: f64,
    pub uptime: f64,
}

pub const TABLE_CHIPS: [f64; 5] = [150_000.0, 300_000.0, 600_000.0, 1_200_000.0, 2_400_000.0];
pub const TABLE_LEARNERS: [usize; 5] = [1, 2, 4, 8, 16];

/// Goodput/uptime grid: a non-elastic row, then one elastic row per learner count.
pub fn chaos_table(base: &ChaosConfig, learners: &[usize], chips: &[f64], steps: u64, seed: u64) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &n in chips {
        let cfg = ChaosConfig { n_chip: n, elastic: false, learners: 1, ..*base };
        let g = simulate_goodput(&cfg, steps, seed);
        rows.push(TableRow { learners: None, n_chip: n, mtbi_chip: base.mtbi_chip, goodput: g.goodput(), uptime: g.uptime() });
    }
    for &m in learners {
        for &n in chips {
            let cfg = ChaosConfig { n_chip: n, elastic: true, learners: m, ..*base };
            let g = simulate_goodput(&cfg, steps, seed);
            rows.push(TableRow { learners: Some(m), n_chip: n, mtbi_chip: base.mtbi_chip, goodput: g.goodput(), uptime: g.uptime() });
        }
    }
    rows
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("M,n_chip,mtbi_s,goodput,uptime\n");
    for r in rows {
        let m = r.learners.map_or("no_elastic".to_string(), |m| m.to_string());
        out.push_str(&format!("{},{},{},{:.4},{:.4}\n", m, r.n_chip, r.mtbi_chip, r.goodput, r.uptime));
    }
    out
}
