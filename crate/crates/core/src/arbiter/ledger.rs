use serde::{Deserialize, Serialize};

use super::types::{GameId, TaskId};
use crate::hash::Digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    TaskRegistered,
    ClaimSubmitted,
    Accepted,
    ChallengeOpened,
    Bisection,
    OneStepVerified,
    Verdict,
    TimeoutDefault,
    TaskFailed,
}

/// One append-only ledger entry; totally ordered by `(round, seq)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub round: u64,
    pub seq: u64,
    pub kind: EventKind,
    pub task_id: TaskId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub game: Option<GameId>,
    pub payload_digest: Digest,
    /// Short human-readable summary.
    pub detail: String,
}

impl LedgerEvent {
    pub fn digest(&self) -> Digest {
        Digest::of(
            serde_json::to_string(self)
                .expect("ledger events serialize")
                .as_bytes(),
        )
    }
}

/// Hash chain over the ledger: `d_0 = 0`, `d_{k+1} = H(d_k ‖ H(event_k))`.
pub fn ledger_digest(events: &[LedgerEvent]) -> Digest {
    events
        .iter()
        .fold(Digest::ZERO, |acc, e| Digest::combine(&acc, &e.digest()))
}

/// JSON-lines export, one event per line.
pub fn to_jsonl(events: &[LedgerEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("ledger events serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(s: &str) -> Result<Vec<LedgerEvent>, serde_json::Error> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
