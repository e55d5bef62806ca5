use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ddl_core::bandwidth::{bandwidth_csv, bandwidth_table, BandwidthQuery, BwMethod};
use ddl_core::causality::{generate_synthetic_tape, replay, Tape, WorkerId};
use ddl_core::chaos::{chaos_table, table_csv, TABLE_CHIPS, TABLE_LEARNERS};
use ddl_core::config::{ExperimentConfig, Method};
use ddl_core::harness::experiments::{run_decoupled, run_decoupled_live, run_dp, ExperimentReport};
use ddl_core::resilience::snapshot::resume;
use ddl_core::runtime::build_plan;
use ddl_core::{Error, Result};

/// Decoupled training experiments: simulate, record, replay and report.
#[derive(Parser)]
#[command(name = "ddl", version)]
struct Cli {
    /// Experiment configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with the configured method and write report.json / report.csv.
    Train(Train),
    #[command(subcommand)]
    Tape(TapeCmd),
    #[command(subcommand)]
    Chaos(ChaosCmd),
    #[command(subcommand)]
    Bw(BwCmd),
    #[command(subcommand)]
    Plan(PlanCmd),
    #[command(subcommand)]
    Ckpt(CkptCmd),
    /// Print the effective configuration as `key = value` lines.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Discrete-event scheduler in virtual time.
    Det,
    /// One thread per worker, wall-clock time.
    Live,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_enum, default_value = "det")]
    mode: Mode,
    /// Also write the event tape here.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Report directory (default: the configured output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TapeCmd {
    /// Run the decoupled protocol and write its tape.
    Record {
        #[arg(long, value_enum, default_value = "det")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a tape and print per-worker checksums.
    Replay { tape: PathBuf },
    /// Schedule-only tape from the chaos and speed models (no training).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ChaosCmd {
    /// Goodput/uptime grid over learner counts and cluster sizes.
    Table {
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BwCmd {
    /// Required bandwidth (Gbit/s) per compute-utilization target.
    Table {
        #[arg(long, default_value_t = 5e9)]
        params: f64,
        #[arg(long, default_value_t = 16.0)]
        bits: f64,
        /// Fragments per model (default: the configured count).
        #[arg(long)]
        fragments: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Print the fragment plan for the configured model.
    Inspect {
        /// layer, tensor or balanced.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        fragments: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CkptCmd {
    /// Restore a snapshot, finish the run from its tape and print checksums.
    Resume {
        /// One snapshot directory (`snap-<id>`).
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        tape: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(kv.clone(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `text` to `dir/name`, or to stdout without a directory.
fn emit(text: &str, out: Option<&Path>, name: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, text)?;
            info!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn checksum_text(sums: &BTreeMap<WorkerId, u64>) -> String {
    let mut out = String::new();
    for (w, c) in sums {
        let name = match w {
            WorkerId::Learner(m) => format!("learner-{m}"),
            WorkerId::Syncer => "syncer".to_string(),
        };
        let _ = writeln!(out, "{name}\t{c:016x}");
    }
    out
}

fn train(cfg: &ExperimentConfig, mode: Mode, record: Option<&Path>) -> Result<(ExperimentReport, BTreeMap<WorkerId, u64>)> {
    let task = cfg.task.build()?;
    match (cfg.runtime.method, mode) {
        (Method::Dp, _) => {
            if record.is_some() {
                return Err(Error::config("runtime.method", "the data-parallel baseline has no event tape"));
            }
            Ok((run_dp(cfg, task)?, BTreeMap::new()))
        }
        (Method::Decoupled, Mode::Det) => {
            let (report, out) = run_decoupled(cfg, task, record)?;
            Ok((report, out.checksums()))
        }
        (Method::Decoupled, Mode::Live) => {
            let (report, out) = run_decoupled_live(cfg, task, record)?;
            Ok((report, out.checksums()))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Train(t) => {
            let (report, _) = train(&cfg, t.mode, t.record.as_deref())?;
            let dir = t.out.unwrap_or_else(|| cfg.output_dir.clone());
            report.write(&dir)?;
            info!("report in {} ({:.2} s)", dir.display(), report.wall_seconds);
            println!("{}\n{}", ExperimentReport::CSV_HEADER, report.csv_row());
        }
        Cmd::Tape(TapeCmd::Record { mode, out }) => {
            cfg.runtime.method = Method::Decoupled;
            let (_, sums) = train(&cfg, mode, Some(&out))?;
            print!("{}", checksum_text(&sums));
        }
        Cmd::Tape(TapeCmd::Replay { tape }) => {
            let tape = Tape::load(&tape)?;
            let task = cfg.task.build()?;
            let exec = replay(&tape, &cfg, Some(task))?;
            print!("{}", checksum_text(&exec.checksums()));
        }
        Cmd::Tape(TapeCmd::Synth { out }) => {
            let tape = generate_synthetic_tape(&cfg)?;
            tape.save(&out)?;
            println!("{} events", tape.events.len());
        }
        Cmd::Chaos(ChaosCmd::Table { steps, out }) => {
            let rows = chaos_table(&cfg.chaos.model, &TABLE_LEARNERS, &TABLE_CHIPS, steps, cfg.seed);
            emit(&table_csv(&rows), out.as_deref(), "chaos_table.csv")?;
        }
        Cmd::Bw(BwCmd::Table { params, bits, fragments, out }) => {
            let base = BandwidthQuery::new(params, bits, fragments.unwrap_or(cfg.runtime.fragments), BwMethod::Dp);
            emit(&bandwidth_csv(&bandwidth_table(&base)?), out.as_deref(), "bandwidth.csv")?;
        }
        Cmd::Plan(PlanCmd::Inspect { strategy, fragments, out }) => {
            if let Some(s) = strategy {
                cfg.set("runtime.strategy", &s)?;
            }
            if let Some(p) = fragments {
                cfg.set("runtime.fragments", &p.to_string())?;
            }
            cfg.validate()?;
            let plan = build_plan(&cfg)?;
            let header = format!(
                "# fragments={} max_load={} total={}\n",
                plan.num_fragments(),
                plan.max_load(),
                plan.loads().iter().sum::<usize>()
            );
            emit(&(header + &plan.to_text()), out.as_deref(), "plan.txt")?;
        }
        Cmd::Config => print!("{}", cfg.canonical_text()),
        Cmd::Ckpt(CkptCmd::Resume { dir, tape }) => {
            let tape = Tape::load(&tape)?;
            let task = cfg.task.build()?;
            let exec = resume(&dir, &tape, &cfg, Some(task))?;
            print!("{}", checksum_text(&exec.checksums()));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InfeasiblePlan(_) => 2,
        Error::ReplayIntegrity { .. } | Error::ConfigHashMismatch { .. } => 3,
        Error::SnapshotIntegrity(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DDL_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
