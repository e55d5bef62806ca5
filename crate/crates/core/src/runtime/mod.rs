//! Learners, the syncer, their messages, and the schedulers that run them.

pub mod executor;
pub mod learner;
pub mod live;
pub mod sim;
pub mod syncer;
pub mod transport;

pub use executor::{build_plan, Executor};
pub use learner::{Counter, LearnerState, Metadata};
pub use live::{run_live, LiveOutcome, LiveRunner};
pub use sim::{simulate, RunOutcome, SimReport, Simulator};
pub use syncer::{grace_window, GlobalFragment, SyncerState};
