//! Snapshot files and resuming from them.
//!
//! Layout under the snapshot root:
//!
//! ```text
//! snap-<t_s>/syncer.bin        syncer state at the start of the snapshot
//! snap-<t_s>/learner-<m>.bin   learner m's checkpoint
//! snap-<t_s>/manifest.json     checksums, cut positions, absent learners,
//!                              in-flight messages
//! ```
//!
//! A snapshot is complete only once its manifest exists.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fnv::FnvHasher;
use log::info;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::causality::{EventPayload, InFlight, Tape, WorkerId};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::tasks::Task;
use crate::runtime::executor::{Executor, Transfer};
use crate::runtime::learner::LearnerState;
use crate::runtime::syncer::{GlobalFragment, SyncerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncerSnapshot {
    pub snapshot: u64,
    pub seq: u64,
    pub syncer: SyncerState,
    pub transfers: Vec<Transfer>,
    pub retired: BTreeMap<u16, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSnapshot {
    pub snapshot: u64,
    pub seq: u64,
    pub state: LearnerState,
    /// Global fragments received but not yet applied at the checkpoint.
    pub pending: Vec<GlobalFragment>,
    /// Transfers this learner served that were still outstanding.
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerEntry {
    pub id: u16,
    pub seq: u64,
    pub file: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub snapshot: u64,
    pub config_hash: String,
    pub syncer_seq: u64,
    pub syncer: FileEntry,
    pub learners: Vec<LearnerEntry>,
    pub absent: Vec<u16>,
    pub in_flight: Vec<InFlight>,
}

fn bytes_checksum(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

pub struct SnapshotStore {
    root: PathBuf,
}

impl SnapshotStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SnapshotStore { root: root.into() }
    }

    pub fn dir(&self, snapshot: u64) -> PathBuf {
        self.root.join(format!("snap-{snapshot}"))
    }

    fn write<T: Serialize>(&self, snapshot: u64, name: &str, value: &T) -> Result<FileEntry> {
        let dir = self.dir(snapshot);
        std::fs::create_dir_all(&dir)?;
        let bytes = bincode::serialize(value)?;
        std::fs::write(dir.join(name), &bytes)?;
        Ok(FileEntry { file: name.to_string(), checksum: bytes_checksum(&bytes) })
    }

    pub fn write_syncer(&self, s: &SyncerSnapshot) -> Result<FileEntry> {
        self.write(s.snapshot, "syncer.bin", s)
    }

    pub fn write_learner(&self, m: u16, s: &LearnerSnapshot) -> Result<FileEntry> {
        self.write(s.snapshot, &format!("learner-{m}.bin"), s)
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let path = self.dir(m.snapshot).join("manifest.json");
        std::fs::write(path, serde_json::to_string_pretty(m)?)?;
        Ok(())
    }

    /// Snapshot ids with a manifest, ascending.
    pub fn complete(&self) -> Result<Vec<u64>> {
        let mut ids = Vec::new();
        if !self.root.exists() {
            return Ok(ids);
        }
        for entry in std::fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(id) = name.to_str().and_then(|n| n.strip_prefix("snap-")).and_then(|n| n.parse().ok()) else {
                continue;
            };
            if entry.path().join("manifest.json").exists() {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSnapshot {
    pub manifest: Manifest,
    pub syncer: SyncerSnapshot,
    pub learners: Vec<LearnerSnapshot>,
}

fn read_checked<T: DeserializeOwned>(dir: &Path, entry: &FileEntry) -> Result<T> {
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::SnapshotIntegrity(format!("cannot read {}: {e}", path.display())))?;
    if bytes_checksum(&bytes) != entry.checksum {
        return Err(Error::SnapshotIntegrity(format!("checksum mismatch for {}", path.display())));
    }
    bincode::deserialize(&bytes).map_err(|e| Error::SnapshotIntegrity(format!("{}: {e}", path.display())))
}

/// Reads a snapshot directory, verifying every checksum.
pub fn load_snapshot(dir: &Path) -> Result<LoadedSnapshot> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::SnapshotIntegrity(format!("no manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::SnapshotIntegrity(format!("bad manifest: {e}")))?;
    let syncer: SyncerSnapshot = read_checked(dir, &manifest.syncer)?;
    if syncer.snapshot != manifest.snapshot || syncer.seq != manifest.syncer_seq {
        return Err(Error::SnapshotIntegrity("syncer file belongs to another snapshot".into()));
    }
    let mut learners = Vec::with_capacity(manifest.learners.len());
    for e in &manifest.learners {
        let l: LearnerSnapshot = read_checked(dir, &e.file)?;
        if l.snapshot != manifest.snapshot || l.seq != e.seq || l.state.id != e.id {
            return Err(Error::SnapshotIntegrity(format!("learner file {} does not match manifest", e.file.file)));
        }
        learners.push(l);
    }
    Ok(LoadedSnapshot { manifest, syncer, learners })
}

/// Restores a snapshot and continues the run by replaying the tape after
/// each worker's cut. Learners absent from the snapshot rejoin at their next
/// recovery on the tape.
pub fn resume(dir: &Path, tape: &Tape, cfg: &ExperimentConfig, task: Option<Arc<dyn Task>>) -> Result<Executor> {
    let snap = load_snapshot(dir)?;
    let run = cfg.replay_hash();
    if snap.manifest.config_hash != run {
        return Err(Error::ConfigHashMismatch { tape: snap.manifest.config_hash.clone(), run });
    }
    if tape.header.config_hash != run {
        return Err(Error::ConfigHashMismatch { tape: tape.header.config_hash.clone(), run });
    }
    let mut exec = Executor::new(cfg, task)?;
    exec.set_snapshot_store(None);

    let mut rounds: BTreeMap<u64, GlobalFragment> = BTreeMap::new();
    let mut transfers = snap.syncer.transfers.clone();
    let mut cuts: BTreeMap<u16, u64> = BTreeMap::new();
    let mut states = Vec::with_capacity(snap.learners.len());
    for l in snap.learners {
        for g in l.pending {
            rounds.insert(g.round, g);
        }
        transfers.extend(l.transfers);
        cuts.insert(l.state.id, l.seq);
        states.push(l.state);
    }
    exec.restore(snap.syncer.syncer, states, rounds.into_values().collect(), transfers, snap.syncer.retired);
    if !snap.manifest.in_flight.is_empty() {
        info!(
            "snapshot {}: {} in-flight learner messages re-delivered through the tape",
            snap.manifest.snapshot,
            snap.manifest.in_flight.len()
        );
    }

    let mut rejoined: BTreeSet<u16> = BTreeSet::new();
    for e in tape.events.iter().filter(|e| e.seq > snap.manifest.syncer_seq) {
        let apply = match e.worker {
            WorkerId::Syncer => true,
            WorkerId::Learner(m) => match cuts.get(&m) {
                Some(&cut) => e.seq > cut,
                None => {
                    match e.payload {
                        EventPayload::Recovery { .. } => {
                            rejoined.insert(m);
                        }
                        EventPayload::Failure { crash: true, .. } if !rejoined.contains(&m) => {
                            exec.note_retired(m, e.local_step);
                        }
                        _ => {}
                    }
                    rejoined.contains(&m)
                }
            },
        };
        if apply {
            exec.handle_recorded(e)?;
        }
    }
    Ok(exec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupt_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path());
        let plan = {
            let cfg = ExperimentConfig::default();
            crate::runtime::executor::build_plan(&cfg).unwrap()
        };
        let syncer = SyncerState::new(vec![], &plan, 0.7, 0.9, true).unwrap();
        let s = SyncerSnapshot { snapshot: 10, seq: 3, syncer, transfers: vec![], retired: BTreeMap::new() };
        let f = store.write_syncer(&s).unwrap();
        let manifest = Manifest {
            snapshot: 10,
            config_hash: "x".into(),
            syncer_seq: 3,
            syncer: f,
            learners: vec![],
            absent: vec![1],
            in_flight: vec![],
        };
        store.write_manifest(&manifest).unwrap();
        assert_eq!(store.complete().unwrap(), vec![10]);
        let loaded = load_snapshot(&store.dir(10)).unwrap();
        assert_eq!(loaded.syncer, s);

        let path = store.dir(10).join("syncer.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_snapshot(&store.dir(10)), Err(Error::SnapshotIntegrity(_))));
    }
}
