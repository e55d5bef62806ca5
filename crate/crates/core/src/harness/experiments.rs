//! Baselines and end-to-end runs with their reports.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chaos::dp_elastic_baseline;
use crate::config::{ExperimentConfig, Method};
use crate::error::Result;
use crate::optim::{InnerOptConfig, InnerOptState};
use crate::runtime::live::{LiveOutcome, LiveRunner};
use crate::runtime::sim::{RunOutcome, Simulator};

use super::tasks::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct DpRun {
    pub params: Vec<f64>,
    pub train_losses: Vec<f64>,
}

/// Synchronous data-parallel training: every step averages the gradients of
/// `learners` shards, each on `batch` examples, and takes one inner step.
pub fn run_dp_reference(
    task: &dyn Task,
    learners: usize,
    steps: u64,
    batch: usize,
    inner: InnerOptConfig,
) -> Result<DpRun> {
    let mut params = task.init_params();
    let mut opt = InnerOptState::new(inner, params.len());
    let mut train_losses = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for m in 0..learners as u16 {
            let b = task.batch(m, step, batch);
            let (l, g) = task.loss_and_grad(&params, &b)?;
            loss += l;
            for (a, x) in grad.iter_mut().zip(&g) {
                *a += x;
            }
        }
        let n = learners as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        opt.step(&mut params, &grad)?;
        train_losses.push(loss / n);
    }
    Ok(DpRun { params, train_losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub learners: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub goodput: f64,
    pub uptime: f64,
    pub mean_admitted: f64,
    pub admitted: Vec<usize>,
    pub virtual_time: f64,
    /// Not serialized, so reports are byte-identical across reruns.
    #[serde(skip)]
    pub wall_seconds: f64,
    pub recoveries: usize,
    pub crashes: usize,
    pub checksum: String,
}

impl ExperimentReport {
    pub const CSV_HEADER: &'static str =
        "method,seed,learners,steps,final_loss,goodput,uptime,mean_admitted,virtual_time,recoveries,crashes,checksum";

    pub fn csv_row(&self) -> String {
        let method = match self.method {
            Method::Decoupled => "decoupled",
            Method::Dp => "dp",
        };
        format!(
            "{method},{},{},{},{:.9},{:.6},{:.6},{:.4},{:.3},{},{},{}",
            self.seed,
            self.learners,
            self.steps,
            self.final_loss,
            self.goodput,
            self.uptime,
            self.mean_admitted,
            self.virtual_time,
            self.recoveries,
            self.crashes,
            self.checksum
        )
    }

    /// Writes `report.json` and `report.csv` under `dir`. Wall time appears
    /// only on the CSV's leading comment line.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let csv = format!("# wall_seconds={:.3}\n{}\n{}\n", self.wall_seconds, Self::CSV_HEADER, self.csv_row());
        std::fs::write(dir.join("report.csv"), csv)?;
        Ok(())
    }
}

/// Runs the full protocol in the deterministic scheduler and evaluates the
/// syncer's global parameters.
pub fn run_decoupled(
    cfg: &ExperimentConfig,
    task: Arc<dyn Task>,
    record: Option<&Path>,
) -> Result<(ExperimentReport, RunOutcome)> {
    let started = Instant::now();
    let sim = match record {
        Some(path) => Simulator::streaming(cfg, Some(task.clone()), path)?,
        None => Simulator::new(cfg, Some(task.clone()))?,
    };
    let out = sim.snapshot_dir(cfg.snapshot.dir.clone().filter(|_| cfg.snapshot.interval > 0)).run()?;
    let theta = &out.executor.syncer().theta;
    let r = &out.report;
    let report = ExperimentReport {
        method: Method::Decoupled,
        seed: cfg.seed,
        learners: cfg.runtime.learners,
        steps: cfg.runtime.steps,
        final_loss: task.eval_loss(theta),
        goodput: if cfg.chaos.enabled { r.goodput.goodput() } else { 1.0 },
        uptime: r.goodput.uptime(),
        mean_admitted: r.mean_admitted(),
        admitted: r.admitted.clone(),
        virtual_time: r.virtual_time,
        wall_seconds: started.elapsed().as_secs_f64(),
        recoveries: r.recoveries,
        crashes: r.crashes,
        checksum: format!("{:016x}", out.executor.syncer().checksum()),
    };
    Ok((report, out))
}

/// Runs the protocol on threads (live mode). Virtual time is not tracked, so
/// the report carries zero there and wall time is measured instead.
pub fn run_decoupled_live(
    cfg: &ExperimentConfig,
    task: Arc<dyn Task>,
    record: Option<&Path>,
) -> Result<(ExperimentReport, LiveOutcome)> {
    let runner = LiveRunner::new(cfg, Some(task.clone()))?;
    let out = match record {
        Some(path) => runner.run_streaming(path)?,
        None => runner.run()?,
    };
    let mean = if out.admitted.is_empty() {
        0.0
    } else {
        out.admitted.iter().sum::<usize>() as f64 / out.admitted.len() as f64
    };
    let report = ExperimentReport {
        method: Method::Decoupled,
        seed: cfg.seed,
        learners: cfg.runtime.learners,
        steps: cfg.runtime.steps,
        final_loss: task.eval_loss(&out.syncer.theta),
        goodput: 1.0,
        uptime: 1.0,
        mean_admitted: mean,
        admitted: out.admitted.clone(),
        virtual_time: 0.0,
        wall_seconds: out.wall_seconds,
        recoveries: 0,
        crashes: 0,
        checksum: format!("{:016x}", out.syncer.checksum()),
    };
    Ok((report, out))
}

/// The data-parallel baseline under the same budget; with chaos enabled its
/// goodput is that of one elastic learner spanning the cluster.
pub fn run_dp(cfg: &ExperimentConfig, task: Arc<dyn Task>) -> Result<ExperimentReport> {
    let started = Instant::now();
    let rt = &cfg.runtime;
    let run = run_dp_reference(task.as_ref(), rt.learners, rt.steps, cfg.task.batch, cfg.optim.inner)?;
    let (goodput, uptime) = if cfg.chaos.enabled {
        let g = dp_elastic_baseline(&cfg.chaos_model(), rt.steps, cfg.seed);
        (g.goodput(), g.uptime())
    } else {
        (1.0, 1.0)
    };
    Ok(ExperimentReport {
        method: Method::Dp,
        seed: cfg.seed,
        learners: rt.learners,
        steps: rt.steps,
        final_loss: task.eval_loss(&run.params),
        goodput,
        uptime,
        mean_admitted: rt.learners as f64,
        admitted: Vec::new(),
        virtual_time: rt.steps as f64 * rt.step_time,
        wall_seconds: started.elapsed().as_secs_f64(),
        recoveries: 0,
        crashes: 0,
        checksum: format!("{:016x}", crate::model::checksum(&run.params)),
    })
}

/// Runs whichever method the configuration selects.
pub fn run_experiment(cfg: &ExperimentConfig, record: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let task = cfg.task.build()?;
    match cfg.runtime.method {
        Method::Dp => run_dp(cfg, task),
        Method::Decoupled => Ok(run_decoupled(cfg, task, record)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tasks::{Family, TaskSpec};
    use crate::optim::InnerKind;

    #[test]
    fn single_learner_reference_is_solo_training() {
        let spec = TaskSpec { family: Family::LinearRegression, ..TaskSpec::default() };
        let task = spec.build().unwrap();
        let inner = InnerOptConfig { kind: InnerKind::Sgd, lr: 0.05, ..InnerOptConfig::default() };
        let run = run_dp_reference(task.as_ref(), 1, 20, 8, inner).unwrap();
        let mut solo = task.init_params();
        let mut opt = InnerOptState::new(inner, solo.len());
        for step in 1..=20 {
            let (_, g) = task.loss_and_grad(&solo, &task.batch(0, step, 8)).unwrap();
            opt.step(&mut solo, &g).unwrap();
        }
        assert_eq!(run.params, solo);
        assert_eq!(run_dp_reference(task.as_ref(), 1, 20, 8, inner).unwrap(), run);
    }
}
