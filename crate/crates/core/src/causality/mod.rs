//! Vector clocks, event tapes and deterministic replay.

pub mod replay;
pub mod tape;
pub mod vclock;

pub use replay::{generate_synthetic_tape, replay, replay_traced};
pub use tape::{Admission, EventPayload, InFlight, Tape, TapeEvent, TapeHeader, TapeRecorder};
pub use vclock::{VectorClock, WorkerId};
