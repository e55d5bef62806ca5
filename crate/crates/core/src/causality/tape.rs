//! Event tapes: a header line followed by one JSON event per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vclock::{VectorClock, WorkerId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeHeader {
    pub config_hash: String,
    pub seed: u64,
    pub learners: usize,
    pub quorum: usize,
    pub cycle: usize,
    pub fragments: usize,
    pub overlap: u64,
    /// Canonical configuration text the run was started with.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub learner: u16,
    pub t_m: u64,
    pub c_steps: u64,
    pub c_tokens: u64,
    pub weight: f64,
}

/// A learner message that crossed a snapshot cut: sent before the learner
/// checkpointed, received by the syncer after the snapshot began.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InFlight {
    pub learner: u16,
    pub t_m: u64,
    pub t_known: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    /// Learner completed one inner step on `tokens` tokens.
    Step { tokens: u64 },
    /// Syncer received learner metadata (informational).
    MetadataRecv { t_m: u64, t_known: u64 },
    /// Learner answered a pull for syncer step `step`; its current fragment is captured.
    FragmentPull { step: u64, fragment: u32 },
    /// Syncer closed round `step`, merging the listed learners' pulled fragments.
    QuorumClose { step: u64, fragment: Option<u32>, admitted: Vec<Admission> },
    /// Learner applied the global fragment produced by round `round`.
    FragmentApply { round: u64, fragment: u32 },
    /// Slice loss or, with `crash`, loss of the whole learner process.
    Failure { crash: bool, up_slices: u32 },
    /// Peer captured its state for a joining learner.
    RecoveryServe { newcomer: u16, t_s: u64 },
    /// Joining learner installed the state captured from `peer`.
    Recovery { peer: u16, t_s: u64 },
    /// Recovery overran its budget; the captured state is discarded.
    RecoveryAbort { peer: u16, t_s: u64 },
    /// Syncer started snapshot `snapshot`, or a learner checkpointed for it.
    /// `pending` lists rounds received but not yet applied.
    SnapshotBegin { snapshot: u64, pending: Vec<u64> },
    SnapshotEnd { snapshot: u64, absent: Vec<u16>, in_flight: Vec<InFlight> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeEvent {
    pub seq: u64,
    pub worker: WorkerId,
    pub local_step: u64,
    pub time: f64,
    pub vclock: VectorClock,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub header: TapeHeader,
    pub events: Vec<TapeEvent>,
}

impl Tape {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Tape> {
        Self::read(text.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tape> {
        Self::read(BufReader::new(File::open(path)?))
    }

    fn read<R: BufRead>(r: R) -> Result<Tape> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| Error::Codec("empty tape".into()))??;
        let header: TapeHeader = serde_json::from_str(&header_line)?;
        let mut events = Vec::new();
        let mut last: Option<u64> = None;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TapeEvent = serde_json::from_str(&line)?;
            if last.is_some_and(|l| e.seq <= l) {
                return Err(Error::integrity(e.seq, "sequence numbers must increase"));
            }
            last = Some(e.seq);
            events.push(e);
        }
        Ok(Tape { header, events })
    }

    /// Every fragment application must cite a round that closed earlier.
    pub fn check_causality(&self) -> Result<()> {
        let mut closed = std::collections::HashSet::new();
        for e in &self.events {
            match &e.payload {
                EventPayload::QuorumClose { step, .. } => {
                    closed.insert(*step);
                }
                EventPayload::FragmentApply { round, .. } if !closed.contains(round) => {
                    return Err(Error::integrity(e.seq, format!("apply of round {round} before it closed")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Single serialized sink; optionally streams each event to a file as it is
/// recorded.
pub struct TapeRecorder {
    header: TapeHeader,
    events: Vec<TapeEvent>,
    sink: Option<BufWriter<File>>,
}

impl TapeRecorder {
    pub fn new(header: TapeHeader) -> Self {
        TapeRecorder { header, events: Vec::new(), sink: None }
    }

    pub fn streaming(header: TapeHeader, path: &Path) -> Result<Self> {
        let mut sink = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut sink, &header)?;
        sink.write_all(b"\n")?;
        Ok(TapeRecorder { header, events: Vec::new(), sink: Some(sink) })
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn record(
        &mut self,
        worker: WorkerId,
        local_step: u64,
        time: f64,
        vclock: VectorClock,
        payload: EventPayload,
    ) -> Result<&TapeEvent> {
        let e = TapeEvent { seq: self.next_seq(), worker, local_step, time, vclock, payload };
        if let Some(s) = self.sink.as_mut() {
            serde_json::to_writer(&mut *s, &e)?;
            s.write_all(b"\n")?;
        }
        self.events.push(e);
        Ok(self.events.last().unwrap())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn finish(mut self) -> Result<Tape> {
        if let Some(mut s) = self.sink.take() {
            s.flush()?;
        }
        Ok(Tape { header: self.header, events: self.events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TapeHeader {
        TapeHeader {
            config_hash: "00".into(),
            seed: 1,
            learners: 2,
            quorum: 1,
            cycle: 4,
            fragments: 4,
            overlap: 2,
            config: "a = 1\n".into(),
        }
    }

    #[test]
    fn record_assigns_sequence() {
        let mut r = TapeRecorder::new(header());
        let e = r.record(WorkerId::Learner(0), 1, 0.5, VectorClock::new(), EventPayload::Step { tokens: 64 }).unwrap();
        assert_eq!(e.seq, 0);
        r.record(WorkerId::Learner(1), 1, 0.6, VectorClock::new(), EventPayload::Step { tokens: 64 }).unwrap();
        let tape = r.finish().unwrap();
        assert_eq!(tape.events.len(), 2);
        assert_eq!(tape.events[1].worker, WorkerId::Learner(1));
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut r = TapeRecorder::new(header());
        let vc: VectorClock = [(WorkerId::Learner(0), 3), (WorkerId::Syncer, 2)].into_iter().collect();
        r.record(
            WorkerId::Syncer,
            2,
            1.0 / 3.0,
            vc,
            EventPayload::QuorumClose {
                step: 2,
                fragment: Some(1),
                admitted: vec![Admission { learner: 0, t_m: 3, c_steps: 3, c_tokens: 96, weight: 3072.1 / 7.0 }],
            },
        )
        .unwrap();
        r.record(WorkerId::Learner(0), 3, 1.5, VectorClock::new(), EventPayload::FragmentApply { round: 2, fragment: 1 })
            .unwrap();
        let tape = r.finish().unwrap();
        let text = tape.to_jsonl().unwrap();
        assert!(text.lines().nth(1).unwrap().contains(r#""kind":"quorum_close""#));
        let back = Tape::from_jsonl(&text).unwrap();
        assert_eq!(back, tape);
        back.check_causality().unwrap();
    }

    #[test]
    fn causality_violation_detected() {
        let mut r = TapeRecorder::new(header());
        r.record(WorkerId::Learner(0), 1, 0.0, VectorClock::new(), EventPayload::FragmentApply { round: 5, fragment: 0 })
            .unwrap();
        let tape = r.finish().unwrap();
        assert!(matches!(tape.check_causality(), Err(Error::ReplayIntegrity { seq: 0, .. })));
    }
}
