use std::fmt;

use serde::{Deserialize, Serialize};

use crate::hash::{Digest, MerkleProof};
use crate::vm::{MicroOp, ProgramHeader, StateOpening};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScrutineerId(pub u32);

impl fmt::Display for ScrutineerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

pub type TaskId = String;
pub type GameId = u64;

/// A computation registered with the arbiter: program, committed input and
/// the initial state every honest trace must start from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub program_hash: Digest,
    pub header: ProgramHeader,
    pub input_hash: Digest,
    pub initial_state_hash: Digest,
}

/// Proofs binding a claim's output hash to its trace root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimEvidence {
    pub initial_proof: MerkleProof,
    pub final_state_hash: Digest,
    pub final_proof: MerkleProof,
    /// Opening of the final state's output slots.
    pub output_opening: StateOpening,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub task_id: TaskId,
    pub claimant: ScrutineerId,
    pub program_hash: Digest,
    pub input_hash: Digest,
    pub output_hash: Digest,
    pub trace_root: Digest,
    pub step_count: u64,
    /// Set by the arbiter on acceptance.
    #[serde(default)]
    pub submission_round: u64,
    pub evidence: ClaimEvidence,
}

/// What two claims must share to count as the same result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Commitment {
    pub output_hash: Digest,
    pub trace_root: Digest,
    pub step_count: u64,
    pub final_state_hash: Digest,
}

impl Claim {
    pub fn commitment(&self) -> Commitment {
        Commitment {
            output_hash: self.output_hash,
            trace_root: self.trace_root,
            step_count: self.step_count,
            final_state_hash: self.evidence.final_state_hash,
        }
    }
}

/// A state hash with its membership proof in the sender's trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateClaim {
    pub index: u64,
    pub hash: Digest,
    pub proof: MerkleProof,
}

/// Material for re-executing one micro-op.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneStepOpening {
    pub op: MicroOp,
    pub op_proof: MerkleProof,
    pub pre_state: StateOpening,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Party {
    Asserter,
    Challenger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SilentParty {
    Asserter,
    Challenger,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    AsserterWins,
    ChallengerWins,
}

impl Verdict {
    pub fn loser(self) -> Party {
        match self {
            Verdict::AsserterWins => Party::Challenger,
            Verdict::ChallengerWins => Party::Asserter,
        }
    }

    pub fn against(party: Party) -> Self {
        match party {
            Party::Asserter => Verdict::ChallengerWins,
            Party::Challenger => Verdict::AsserterWins,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Bisecting,
    OneStep,
    Resolved,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictReason {
    OneStep,
    Timeout(SilentParty),
    InvalidProof(Party),
}

/// Interactive bisection between two conflicting claims.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeGame {
    pub id: GameId,
    pub task_id: TaskId,
    pub asserter: ScrutineerId,
    pub challenger: ScrutineerId,
    pub asserter_root: Digest,
    pub challenger_root: Digest,
    pub step_count: u64,
    pub lo: u64,
    pub hi: u64,
    /// Asserter's (agreed) hash at `lo`.
    pub lo_hash: Digest,
    /// Asserter's (disputed) hash at `hi`.
    pub hi_hash: Digest,
    pub phase: Phase,
    pub awaiting: Party,
    pub pending_mid: Option<StateClaim>,
    pub deadline: u64,
    pub rounds_elapsed: u32,
    pub verdict: Option<Verdict>,
    pub reason: Option<VerdictReason>,
    pub compute_gas: u64,
    pub proof_gas: u64,
    /// Gas charged by the one-step verification alone.
    pub one_step_gas: u64,
}

impl DisputeGame {
    pub fn mid(&self) -> u64 {
        (self.lo + self.hi) / 2
    }

    pub fn is_resolved(&self) -> bool {
        self.phase == Phase::Resolved
    }

    pub fn party_id(&self, p: Party) -> ScrutineerId {
        match p {
            Party::Asserter => self.asserter,
            Party::Challenger => self.challenger,
        }
    }

    pub fn root_of(&self, p: Party) -> Digest {
        match p {
            Party::Asserter => self.asserter_root,
            Party::Challenger => self.challenger_root,
        }
    }

    pub fn loser(&self) -> Option<ScrutineerId> {
        self.verdict.map(|v| self.party_id(v.loser()))
    }

    /// ceil(log2 T) + 1.
    pub fn round_bound(&self) -> u32 {
        crate::hash::tree_height(self.step_count as usize) + 1
    }
}
