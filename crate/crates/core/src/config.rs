//! Experiment configuration as flat `section.key = value` text.
//!
//! Every key has a default, so an empty file is a valid configuration. The
//! canonical form lists every key in sorted order; its FNV-1a hash identifies
//! the run in tape headers.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Compression, MergeConfig, MergeMethod, WeightMode};
use crate::chaos::{ChaosConfig, ExpWeibull, SpeedClass, SpeedModel};
use crate::error::{Error, Result};
use crate::fragmentation::Strategy;
use crate::harness::tasks::{Family, TaskSpec};
use crate::optim::{InnerKind, InnerOptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Decoupled,
    Dp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub method: Method,
    pub learners: usize,
    pub quorum: usize,
    pub cycle: usize,
    pub fragments: usize,
    pub overlap: u64,
    /// Syncer steps T.
    pub steps: u64,
    pub strategy: Strategy,
    pub step_time: f64,
    pub speed: SpeedModel,
    pub latency: f64,
    /// Link bandwidth in bits per second; 0 means unlimited.
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub inner: InnerOptConfig,
    pub outer_lr: f64,
    pub outer_momentum: f64,
    pub nesterov: bool,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraceConfig {
    pub enabled: bool,
    pub gamma: f64,
    pub ema_decay: f64,
    /// Upper bound on the window; `None` caps at the step-time estimate.
    pub cap: Option<f64>,
}

impl Default for GraceConfig {
    fn default() -> Self {
        GraceConfig { enabled: true, gamma: 0.8, ema_decay: 0.9, cap: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosSection {
    pub enabled: bool,
    pub model: ChaosConfig,
    /// Mean time between whole-learner crashes; 0 disables crashes.
    pub crash_mtbf: f64,
    pub restart_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// State-transfer bandwidth in bits per second; 0 means unlimited.
    pub bandwidth: f64,
    /// Virtual times at which extra learners join.
    pub join: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    /// Syncer steps between snapshots; 0 disables snapshots.
    pub interval: u64,
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub runtime: RuntimeConfig,
    pub merge: MergeConfig,
    pub optim: OptimConfig,
    pub grace: GraceConfig,
    pub chaos: ChaosSection,
    pub recovery: RecoveryConfig,
    pub snapshot: SnapshotConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            task: TaskSpec::default(),
            runtime: RuntimeConfig {
                method: Method::Decoupled,
                learners: 4,
                quorum: 1,
                cycle: 12,
                fragments: 12,
                overlap: 2,
                steps: 600,
                strategy: Strategy::Balanced,
                step_time: 1.0,
                speed: SpeedModel::default(),
                latency: 0.0,
                bandwidth: 0.0,
            },
            merge: MergeConfig::default(),
            optim: OptimConfig {
                inner: InnerOptConfig::default(),
                outer_lr: 0.7,
                outer_momentum: 0.3,
                nesterov: true,
                alpha: 0.0,
            },
            grace: GraceConfig::default(),
            chaos: ChaosSection { enabled: false, model: ChaosConfig::default(), crash_mtbf: 0.0, restart_delay: 60.0 },
            recovery: RecoveryConfig { bandwidth: 0.0, join: Vec::new() },
            snapshot: SnapshotConfig { interval: 0, dir: None },
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::config(key, format!("unknown value `{v}`")))
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum serializes to a string"),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        let rt = &mut self.runtime;
        let ch = &mut self.chaos.model;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "task.family" => self.task.family = parse_enum::<Family>(k, v)?,
            "task.dim" => self.task.dim = parse(k, v)?,
            "task.hidden" => self.task.hidden = parse(k, v)?,
            "task.depth" => self.task.depth = parse(k, v)?,
            "task.classes" => self.task.classes = parse(k, v)?,
            "task.dataset_seed" => self.task.dataset_seed = parse(k, v)?,
            "task.init_seed" => self.task.init_seed = parse(k, v)?,
            "task.shards" => self.task.shards = parse(k, v)?,
            "task.shard_size" => self.task.shard_size = parse(k, v)?,
            "task.eval_size" => self.task.eval_size = parse(k, v)?,
            "task.batch" => self.task.batch = parse(k, v)?,
            "task.noise" => self.task.noise = parse(k, v)?,
            "runtime.method" => rt.method = parse_enum(k, v)?,
            "runtime.learners" => rt.learners = parse(k, v)?,
            "runtime.quorum" => rt.quorum = parse(k, v)?,
            "runtime.cycle" => rt.cycle = parse(k, v)?,
            "runtime.fragments" => rt.fragments = parse(k, v)?,
            "runtime.overlap" => rt.overlap = parse(k, v)?,
            "runtime.steps" => rt.steps = parse(k, v)?,
            "runtime.strategy" => rt.strategy = parse(k, v)?,
            "runtime.step_time" => rt.step_time = parse(k, v)?,
            "runtime.speed" => rt.speed.class = parse_enum::<SpeedClass>(k, v)?,
            "runtime.speed_gap" => rt.speed.gap = parse(k, v)?,
            "runtime.jitter" => rt.speed.jitter = parse(k, v)?,
            "runtime.latency" => rt.latency = parse(k, v)?,
            "runtime.bandwidth" => rt.bandwidth = parse(k, v)?,
            "merge.method" => self.merge.method = parse_enum::<MergeMethod>(k, v)?,
            "merge.embedding_method" => self.merge.embedding_method = parse_enum::<MergeMethod>(k, v)?,
            "merge.compression" => self.merge.compression = parse_enum::<Compression>(k, v)?,
            "merge.weight_mode" => self.merge.weight_mode = parse_enum::<WeightMode>(k, v)?,
            "merge.eps_dir" => self.merge.eps_dir = parse(k, v)?,
            "optim.inner" => self.optim.inner.kind = parse_enum::<InnerKind>(k, v)?,
            "optim.inner_lr" => self.optim.inner.lr = parse(k, v)?,
            "optim.beta1" => self.optim.inner.beta1 = parse(k, v)?,
            "optim.beta2" => self.optim.inner.beta2 = parse(k, v)?,
            "optim.eps" => self.optim.inner.eps = parse(k, v)?,
            "optim.weight_decay" => self.optim.inner.weight_decay = parse(k, v)?,
            "optim.outer_lr" => self.optim.outer_lr = parse(k, v)?,
            "optim.outer_momentum" => self.optim.outer_momentum = parse(k, v)?,
            "optim.nesterov" => self.optim.nesterov = parse_bool(k, v)?,
            "optim.alpha" => self.optim.alpha = parse(k, v)?,
            "grace.enabled" => self.grace.enabled = parse_bool(k, v)?,
            "grace.gamma" => self.grace.gamma = parse(k, v)?,
            "grace.ema_decay" => self.grace.ema_decay = parse(k, v)?,
            "grace.cap" => self.grace.cap = if v == "step" { None } else { Some(parse(k, v)?) },
            "chaos.enabled" => self.chaos.enabled = parse_bool(k, v)?,
            "chaos.mtbi_chip" => ch.mtbi_chip = parse(k, v)?,
            "chaos.n_chip" => ch.n_chip = parse(k, v)?,
            "chaos.chips_per_slice" => ch.chips_per_slice = parse(k, v)?,
            "chaos.downscale_time" => ch.downscale_time = parse(k, v)?,
            "chaos.upscale_time" => ch.upscale_time = parse(k, v)?,
            "chaos.repair_alpha" | "chaos.repair_k" | "chaos.repair_median" => {
                let x: f64 = parse(k, v)?;
                let (mut a, mut kk, mut med) = (ch.repair.alpha, ch.repair.k, ch.repair.quantile(0.5));
                match key {
                    "chaos.repair_alpha" => a = x,
                    "chaos.repair_k" => kk = x,
                    _ => med = x,
                }
                ch.repair = ExpWeibull::from_median(a, kk, med);
            }
            "chaos.elastic" => ch.elastic = parse_bool(k, v)?,
            "chaos.crash_mtbf" => self.chaos.crash_mtbf = parse(k, v)?,
            "chaos.restart_delay" => self.chaos.restart_delay = parse(k, v)?,
            "recovery.bandwidth" => self.recovery.bandwidth = parse(k, v)?,
            "recovery.join" => {
                self.recovery.join = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(k, s))
                    .collect::<Result<_>>()?
            }
            "snapshot.interval" => self.snapshot.interval = parse(k, v)?,
            "snapshot.dir" => self.snapshot.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let rt = &self.runtime;
        let ch = &self.chaos.model;
        let t = &self.task;
        let o = &self.optim;
        let f = |x: f64| format!("{x:?}");
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("task.family", enum_str(&t.family)),
            ("task.dim", t.dim.to_string()),
            ("task.hidden", t.hidden.to_string()),
            ("task.depth", t.depth.to_string()),
            ("task.classes", t.classes.to_string()),
            ("task.dataset_seed", t.dataset_seed.to_string()),
            ("task.init_seed", t.init_seed.to_string()),
            ("task.shards", t.shards.to_string()),
            ("task.shard_size", t.shard_size.to_string()),
            ("task.eval_size", t.eval_size.to_string()),
            ("task.batch", t.batch.to_string()),
            ("task.noise", f(t.noise)),
            ("runtime.method", enum_str(&rt.method)),
            ("runtime.learners", rt.learners.to_string()),
            ("runtime.quorum", rt.quorum.to_string()),
            ("runtime.cycle", rt.cycle.to_string()),
            ("runtime.fragments", rt.fragments.to_string()),
            ("runtime.overlap", rt.overlap.to_string()),
            ("runtime.steps", rt.steps.to_string()),
            ("runtime.strategy", rt.strategy.to_string()),
            ("runtime.step_time", f(rt.step_time)),
            ("runtime.speed", enum_str(&rt.speed.class)),
            ("runtime.speed_gap", f(rt.speed.gap)),
            ("runtime.jitter", f(rt.speed.jitter)),
            ("runtime.latency", f(rt.latency)),
            ("runtime.bandwidth", f(rt.bandwidth)),
            ("merge.method", enum_str(&self.merge.method)),
            ("merge.embedding_method", enum_str(&self.merge.embedding_method)),
            ("merge.compression", enum_str(&self.merge.compression)),
            ("merge.weight_mode", enum_str(&self.merge.weight_mode)),
            ("merge.eps_dir", f(self.merge.eps_dir)),
            ("optim.inner", enum_str(&o.inner.kind)),
            ("optim.inner_lr", f(o.inner.lr)),
            ("optim.beta1", f(o.inner.beta1)),
            ("optim.beta2", f(o.inner.beta2)),
            ("optim.eps", f(o.inner.eps)),
            ("optim.weight_decay", f(o.inner.weight_decay)),
            ("optim.outer_lr", f(o.outer_lr)),
            ("optim.outer_momentum", f(o.outer_momentum)),
            ("optim.nesterov", o.nesterov.to_string()),
            ("optim.alpha", f(o.alpha)),
            ("grace.enabled", self.grace.enabled.to_string()),
            ("grace.gamma", f(self.grace.gamma)),
            ("grace.ema_decay", f(self.grace.ema_decay)),
            ("grace.cap", self.grace.cap.map_or("step".into(), f)),
            ("chaos.enabled", self.chaos.enabled.to_string()),
            ("chaos.mtbi_chip", f(ch.mtbi_chip)),
            ("chaos.n_chip", f(ch.n_chip)),
            ("chaos.chips_per_slice", f(ch.chips_per_slice)),
            ("chaos.downscale_time", f(ch.downscale_time)),
            ("chaos.upscale_time", f(ch.upscale_time)),
            ("chaos.repair_alpha", f(ch.repair.alpha)),
            ("chaos.repair_k", f(ch.repair.k)),
            ("chaos.repair_median", f(ch.repair.quantile(0.5))),
            ("chaos.elastic", ch.elastic.to_string()),
            ("chaos.crash_mtbf", f(self.chaos.crash_mtbf)),
            ("chaos.restart_delay", f(self.chaos.restart_delay)),
            ("recovery.bandwidth", f(self.recovery.bandwidth)),
            ("recovery.join", self.recovery.join.iter().map(|x| f(*x)).collect::<Vec<_>>().join(",")),
            ("snapshot.interval", self.snapshot.interval.to_string()),
            ("snapshot.dir", self.snapshot.dir.as_ref().map_or(String::new(), |d| d.display().to_string())),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        e.sort_by(|a, b| a.0.cmp(b.0));
        e
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// 64-bit FNV-1a of the canonical text, as 16 hex digits.
    pub fn hash(&self) -> String {
        config_hash(&self.canonical_text())
    }

    /// Keys that only affect where outputs go are excluded, so a replay may
    /// write elsewhere than the recording run.
    pub fn replay_hash(&self) -> String {
        let mut c = self.clone();
        c.snapshot.dir = None;
        c.output_dir = PathBuf::from("out");
        c.hash()
    }

    pub fn validate(&self) -> Result<()> {
        let rt = &self.runtime;
        if rt.learners == 0 {
            return Err(Error::config("runtime.learners", "need at least one learner"));
        }
        if rt.quorum == 0 || rt.quorum > rt.learners {
            return Err(Error::config("runtime.quorum", format!("must be in 1..={}", rt.learners)));
        }
        if rt.fragments == 0 || rt.cycle == 0 {
            return Err(Error::config("runtime.fragments", "fragments and cycle must be positive"));
        }
        if rt.fragments > rt.cycle {
            return Err(Error::config("runtime.fragments", format!("P = {} exceeds H = {}", rt.fragments, rt.cycle)));
        }
        if rt.steps == 0 {
            return Err(Error::config("runtime.steps", "must be positive"));
        }
        if !(rt.step_time > 0.0) || rt.latency < 0.0 || rt.bandwidth < 0.0 {
            return Err(Error::config("runtime.step_time", "timing parameters must be non-negative, step_time positive"));
        }
        if !(0.0..1.0).contains(&rt.speed.jitter) || rt.speed.gap < 0.0 {
            return Err(Error::config("runtime.jitter", "jitter must be in [0, 1), gap >= 0"));
        }
        if self.total_learners() > self.task.shards {
            return Err(Error::config(
                "task.shards",
                format!("{} shards cannot serve {} learners", self.task.shards, self.total_learners()),
            ));
        }
        if !(self.optim.outer_lr > 0.0) || !(0.0..1.0).contains(&self.optim.outer_momentum) {
            return Err(Error::config("optim.outer_lr", "need outer_lr > 0 and 0 <= outer_momentum < 1"));
        }
        if !(0.0..=1.0).contains(&self.optim.alpha) {
            return Err(Error::config("optim.alpha", "must be in [0, 1]"));
        }
        if !(self.optim.inner.lr > 0.0) {
            return Err(Error::config("optim.inner_lr", "must be positive"));
        }
        let g = &self.grace;
        if !(g.gamma > 0.0 && g.gamma < 1.0) {
            return Err(Error::config("grace.gamma", "must satisfy 0 < gamma < 1"));
        }
        if !(0.0..1.0).contains(&g.ema_decay) {
            return Err(Error::config("grace.ema_decay", "must be in [0, 1)"));
        }
        if g.cap.is_some_and(|c| !(c >= 0.0)) {
            return Err(Error::config("grace.cap", "must be non-negative"));
        }
        if self.chaos.enabled {
            let c = self.chaos_model();
            c.validate()?;
            if c.n_chip < rt.learners as f64 * c.chips_per_slice {
                return Err(Error::config("chaos.n_chip", "fewer chips than one slice per learner"));
            }
        }
        if self.chaos.crash_mtbf < 0.0 || self.chaos.restart_delay < 0.0 || self.recovery.bandwidth < 0.0 {
            return Err(Error::config("chaos.crash_mtbf", "must be non-negative"));
        }
        if self.snapshot.interval > 0 && self.snapshot.dir.is_none() {
            return Err(Error::config("snapshot.dir", "required when snapshot.interval > 0"));
        }
        Ok(())
    }

    /// Learners present at start plus scheduled joins.
    pub fn total_learners(&self) -> usize {
        self.runtime.learners + self.recovery.join.len()
    }

    /// The chaos model sized for this run's learner count and step time.
    pub fn chaos_model(&self) -> ChaosConfig {
        let mut c = self.chaos.model.with_learners(self.runtime.learners);
        c.step_time = self.runtime.step_time;
        c
    }
}

pub fn config_hash(canonical: &str) -> String {
    let mut h = FnvHasher::default();
    h.write(canonical.as_bytes());
    format!("{:016x}", h.finish())
}
