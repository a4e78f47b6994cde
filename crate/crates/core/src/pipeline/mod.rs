//! Postal voting: registration, ballot production, casting, then counting
//! with signature checks and mark reading as committee-verified tasks.

pub mod audit;
pub mod ballots;
pub mod config;
pub mod election;
pub mod models;
pub mod stages;

pub use audit::{audit_links, LinkAudit, LinkPath};
pub use ballots::{
    cast_votes, plan_votes, produce_ballots, register_voters, BallotPaper, Envelope, ReadVote,
    Registry, Vote, VotePlan, VoterRecord,
};
pub use config::{ElectionConfig, TrainingConfig};
pub use election::{
    local_oracle, mail_ballots, prepare_models, publish_results, run_election, BallotRecord,
    ElectionReport, ElectionRun, Mailing, OracleRun,
};
pub use stages::{
    decide, decode, extract_ballots, tabulate, tally, verify_signatures, SignatureCheck,
    SignatureDecision, TallyResult,
};

use crate::committee::RunError;
use crate::provenance::{BindError, ProvenanceError};
use crate::vm::trace::ExecError;
use crate::vm::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("the electorate is empty")]
    EmptyRegistry,
    #[error("voter id `{0}` registered twice")]
    DuplicateVoter(String),
    #[error("voter id `{0}` is not registered")]
    UnknownVoter(String),
    #[error("candidate {0} does not exist")]
    UnknownCandidate(u32),
    #[error("invalid election config: {0}")]
    Config(String),
    #[error("model `{0}` has no audited provenance")]
    Unaudited(String),
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error("training of `{model}` aborted at step {step}")]
    TrainingAborted { model: String, step: u32 },
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("task `{0}` ended without an accepted result")]
    Unresolved(String),
    #[error("task `{0}` is not finalized")]
    Unfinalized(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}
