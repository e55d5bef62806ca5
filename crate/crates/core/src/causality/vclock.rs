use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Learners sort before the syncer, so clocks print as `L0, L1, ..., S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WorkerId {
    Learner(u16),
    Syncer,
}

impl WorkerId {
    pub const SYNCER_WIRE: u16 = u16::MAX;

    pub fn to_wire(self) -> u16 {
        match self {
            WorkerId::Learner(m) => m,
            WorkerId::Syncer => Self::SYNCER_WIRE,
        }
    }

    pub fn from_wire(v: u16) -> Self {
        if v == Self::SYNCER_WIRE {
            WorkerId::Syncer
        } else {
            WorkerId::Learner(v)
        }
    }

    pub fn learner(self) -> Option<u16> {
        match self {
            WorkerId::Learner(m) => Some(m),
            WorkerId::Syncer => None,
        }
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerId::Learner(m) => write!(f, "L{m}"),
            WorkerId::Syncer => f.write_str("S"),
        }
    }
}

impl FromStr for WorkerId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "S" {
            return Ok(WorkerId::Syncer);
        }
        s.strip_prefix('L')
            .and_then(|n| n.parse().ok())
            .map(WorkerId::Learner)
            .ok_or_else(|| Error::Codec(format!("bad worker id `{s}`")))
    }
}

impl Serialize for WorkerId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WorkerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VectorClock(BTreeMap<WorkerId, u64>);

impl VectorClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, w: WorkerId) -> u64 {
        self.0.get(&w).copied().unwrap_or(0)
    }

    /// Raises the entry for `w` to `step` (never lowers it).
    pub fn observe(&mut self, w: WorkerId, step: u64) {
        let e = self.0.entry(w).or_insert(0);
        *e = (*e).max(step);
    }

    pub fn merge(&mut self, other: &VectorClock) {
        for (&w, &s) in &other.0 {
            self.observe(w, s);
        }
    }

    pub fn merged(a: &VectorClock, b: &VectorClock) -> VectorClock {
        let mut out = a.clone();
        out.merge(b);
        out
    }

    /// Componentwise `self <= other`.
    pub fn le(&self, other: &VectorClock) -> bool {
        self.0.iter().all(|(&w, &s)| s <= other.get(w))
    }

    pub fn entries(&self) -> impl Iterator<Item = (WorkerId, u64)> + '_ {
        self.0.iter().map(|(&w, &s)| (w, s))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for VectorClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<")?;
        for (i, (w, s)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{w}: {s}")?;
        }
        f.write_str(">")
    }
}

impl FromIterator<(WorkerId, u64)> for VectorClock {
    fn from_iter<I: IntoIterator<Item = (WorkerId, u64)>>(iter: I) -> Self {
        let mut c = VectorClock::new();
        for (w, s) in iter {
            c.observe(w, s);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use WorkerId::*;

    #[test]
    fn merge_examples() {
        let x: VectorClock = [(Learner(0), 3), (Syncer, 1)].into_iter().collect();
        assert_eq!(VectorClock::merged(&x, &VectorClock::new()), x);

        let a: VectorClock = [(Learner(0), 10), (Syncer, 8)].into_iter().collect();
        let b: VectorClock = [(Learner(0), 9), (Syncer, 9)].into_iter().collect();
        let m = VectorClock::merged(&a, &b);
        assert_eq!(m.to_string(), "<L0: 10, S: 9>");
        assert!(a.le(&m) && b.le(&m));
        assert!(!a.le(&b));
    }

    #[test]
    fn json_keys() {
        let a: VectorClock = [(Learner(3), 2), (Syncer, 7)].into_iter().collect();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"L3":2,"S":7}"#);
        assert_eq!(serde_json::from_str::<VectorClock>(&s).unwrap(), a);
        assert_eq!(WorkerId::from_wire(Syncer.to_wire()), Syncer);
    }
}
