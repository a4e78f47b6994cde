//! The scrutineer committee and its synchronous network.
//!
//! Each round, messages sent in the previous round are delivered to the
//! arbiter, the arbiter closes claim windows and expires deadlines, and every
//! scrutineer acts once in id order.

mod profile;
mod prover;
mod world;

pub use profile::{CommitteeConfig, CommitteeError, ScrutineerProfile, Strategy};
pub use prover::{Fabrication, Prover};
pub use world::{
    GameSummary, PayloadKind, Rejection, RunError, SimMessage, TaskInput, TaskOutcome, World,
    MAX_TASK_ROUNDS,
};

#[cfg(test)]
mod tests;
