//! Simulated layer-1 arbiter.
//!
//! Claims about a registered computation are accepted without re-execution
//! when all of them commit to the same trace. Conflicting claims are settled
//! by binary bisection over the committed state hashes, ending in the
//! re-execution of a single micro-op. Every mutation goes through
//! [`Arbiter::process`], which journals the input so the arbiter can be
//! rebuilt by replay.

mod gas;
mod ledger;
mod types;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use gas::{GasError, GasEstimate, GasModel, DEFAULT_BLOCK_GAS_LIMIT, DEFAULT_GAS_PER_FLOP};
pub use ledger::{from_jsonl, ledger_digest, to_jsonl, EventKind, LedgerEvent};
pub use types::*;

use crate::hash::{tree_height, Digest};
use crate::vm::state::slot_leaf;
use crate::vm::trace::output_hash_from_leaves;

pub const DEFAULT_CLAIM_WINDOW: u64 = 3;
pub const DEFAULT_TIMEOUT_ROUNDS: u64 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArbiterConfig {
    pub gas: GasModel,
    /// Rounds a task accepts claims after registration.
    pub claim_window: u64,
    /// Rounds a dispute party has to make each move.
    pub timeout_rounds: u64,
}

impl Default for ArbiterConfig {
    fn default() -> Self {
        ArbiterConfig {
            gas: GasModel::default(),
            claim_window: DEFAULT_CLAIM_WINDOW,
            timeout_rounds: DEFAULT_TIMEOUT_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ArbiterError {
    #[error("unknown task `{0}`")]
    UnknownTask(TaskId),
    #[error("task `{0}` already registered")]
    DuplicateTask(TaskId),
    #[error("task header does not hash to the program hash")]
    BadHeader,
    #[error("scrutineer {0} is not enrolled")]
    NotEnrolled(ScrutineerId),
    #[error("scrutineer {0} already enrolled")]
    AlreadyEnrolled(ScrutineerId),
    #[error("{claimant} already claimed task `{task}`")]
    DuplicateClaim {
        task: TaskId,
        claimant: ScrutineerId,
    },
    #[error("claim window for `{0}` is closed")]
    WindowClosed(TaskId),
    #[error("claim window for `{0}` is still open")]
    WindowOpen(TaskId),
    #[error("claim does not start from the committed input of `{0}`")]
    InputMismatch(TaskId),
    #[error("claim names the wrong program for `{0}`")]
    ProgramMismatch(TaskId),
    #[error("claim step count {claimed} differs from program length {expected}")]
    StepCountMismatch { claimed: u64, expected: u64 },
    #[error("claim evidence invalid: {0}")]
    InvalidEvidence(String),
    #[error("task `{0}` already finalized")]
    AlreadyFinalized(TaskId),
    #[error("no claim by {0} on this task")]
    NoSuchClaim(ScrutineerId),
    #[error("claims do not conflict")]
    NonConflicting,
    #[error("a game already exists for this pair")]
    GameExists,
    #[error("unknown game {0}")]
    UnknownGame(GameId),
    #[error("game {0} already resolved")]
    AlreadyResolved(GameId),
    #[error("message out of turn")]
    OutOfTurn,
    #[error("malformed hash or proof")]
    MalformedProof,
    #[error("deadline not reached")]
    DeadlineNotReached,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TaskStatus {
    Open,
    Disputed,
    Accepted {
        commitment: Commitment,
        after_dispute: bool,
    },
    Failed {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub spec: TaskSpec,
    pub opened_round: u64,
    pub deadline: u64,
    pub claims: Vec<Claim>,
    pub status: TaskStatus,
    pub voided: BTreeSet<ScrutineerId>,
    pub timed_out: BTreeSet<ScrutineerId>,
    pub games: Vec<GameId>,
    /// Gas spent re-executing micro-ops for this task.
    pub compute_gas: u64,
    /// Gas spent verifying Merkle proofs for this task.
    pub proof_gas: u64,
}

impl TaskRecord {
    pub fn accepted(&self) -> Option<&Commitment> {
        match &self.status {
            TaskStatus::Accepted { commitment, .. } => Some(commitment),
            _ => None,
        }
    }

    pub fn is_final(&self) -> bool {
        matches!(
            self.status,
            TaskStatus::Accepted { .. } | TaskStatus::Failed { .. }
        )
    }

    pub fn claim_of(&self, who: ScrutineerId) -> Option<&Claim> {
        self.claims.iter().find(|c| c.claimant == who)
    }

    fn surviving(&self) -> impl Iterator<Item = &Claim> {
        self.claims
            .iter()
            .filter(|c| !self.voided.contains(&c.claimant))
    }
}

/// Every state-changing request the arbiter accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "kebab-case")]
pub enum ArbiterInput {
    Enroll {
        scrutineer: ScrutineerId,
    },
    RegisterTask {
        spec: TaskSpec,
    },
    SubmitClaim {
        claim: Claim,
    },
    Finalize {
        task_id: TaskId,
    },
    OpenChallenge {
        task_id: TaskId,
        asserter: ScrutineerId,
        challenger: ScrutineerId,
    },
    PostMid {
        game: GameId,
        mid: StateClaim,
    },
    ReplyMid {
        game: GameId,
        mid: StateClaim,
    },
    Bisect {
        game: GameId,
        asserter_mid: StateClaim,
        challenger_agrees: bool,
    },
    OneStep {
        game: GameId,
        opening: OneStepOpening,
    },
    Timeout {
        game: GameId,
        silent: SilentParty,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub round: u64,
    #[serde(flatten)]
    pub input: ArbiterInput,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FinalizeOutcome {
    Accepted(Digest),
    Disputed(Vec<GameId>),
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Done,
    Finalized(FinalizeOutcome),
    Game(GameId),
    Verdict(Verdict),
    Window { lo: u64, hi: u64, phase: Phase },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Arbiter {
    config: ArbiterConfig,
    enrolled: BTreeSet<ScrutineerId>,
    tasks: BTreeMap<TaskId, TaskRecord>,
    games: BTreeMap<GameId, DisputeGame>,
    next_game: GameId,
    ledger: Vec<LedgerEvent>,
    #[serde(skip)]
    journal: Vec<JournalEntry>,
}

impl Arbiter {
    pub fn new(config: ArbiterConfig) -> Self {
        Arbiter {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &ArbiterConfig {
        &self.config
    }

    pub fn gas_model(&self) -> &GasModel {
        &self.config.gas
    }

    pub fn estimate_gas(&self, flops: u64) -> Result<GasEstimate, GasError> {
        self.config.gas.estimate_gas(flops)
    }

    pub fn enrolled(&self) -> &BTreeSet<ScrutineerId> {
        &self.enrolled
    }

    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    pub fn game(&self, id: GameId) -> Option<&DisputeGame> {
        self.games.get(&id)
    }

    pub fn games(&self) -> impl Iterator<Item = &DisputeGame> {
        self.games.values()
    }

    pub fn games_for(&self, task: &str) -> Vec<&DisputeGame> {
        self.tasks
            .get(task)
            .map(|t| t.games.iter().filter_map(|g| self.games.get(g)).collect())
            .unwrap_or_default()
    }

    pub fn ledger(&self) -> &[LedgerEvent] {
        &self.ledger
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn ledger_digest(&self) -> Digest {
        ledger_digest(&self.ledger)
    }

    /// Digest of the full arbiter state (tasks, games, ledger).
    pub fn state_digest(&self) -> Digest {
        Digest::of(
            serde_json::to_string(self)
                .expect("arbiter state serializes")
                .as_bytes(),
        )
    }

    /// Rebuilds an arbiter by re-applying a journal.
    pub fn replay(config: ArbiterConfig, journal: &[JournalEntry]) -> Result<Self, ArbiterError> {
        let mut a = Arbiter::new(config);
        for e in journal {
            a.process(e.round, e.input.clone())?;
        }
        Ok(a)
    }

    // Convenience wrappers around `process`.

    pub fn enroll(&mut self, scrutineer: ScrutineerId) -> Result<(), ArbiterError> {
        self.process(0, ArbiterInput::Enroll { scrutineer })
            .map(|_| ())
    }

    pub fn register_task(&mut self, spec: TaskSpec, now: u64) -> Result<(), ArbiterError> {
        self.process(now, ArbiterInput::RegisterTask { spec })
            .map(|_| ())
    }

    pub fn submit_claim(&mut self, claim: Claim, now: u64) -> Result<(), ArbiterError> {
        self.process(now, ArbiterInput::SubmitClaim { claim })
            .map(|_| ())
    }

    pub fn finalize_task(
        &mut self,
        task_id: &str,
        now: u64,
    ) -> Result<FinalizeOutcome, ArbiterError> {
        match self.process(
            now,
            ArbiterInput::Finalize {
                task_id: task_id.to_string(),
            },
        )? {
            Output::Finalized(f) => Ok(f),
            other => unreachable!("finalize produced {other:?}"),
        }
    }

    pub fn open_challenge(
        &mut self,
        task_id: &str,
        asserter: ScrutineerId,
        challenger: ScrutineerId,
        now: u64,
    ) -> Result<GameId, ArbiterError> {
        let input = ArbiterInput::OpenChallenge {
            task_id: task_id.to_string(),
            asserter,
            challenger,
        };
        match self.process(now, input)? {
            Output::Game(g) => Ok(g),
            other => unreachable!("open_challenge produced {other:?}"),
        }
    }

    pub fn post_mid(
        &mut self,
        game: GameId,
        mid: StateClaim,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        self.process(now, ArbiterInput::PostMid { game, mid })
    }

    pub fn reply_mid(
        &mut self,
        game: GameId,
        mid: StateClaim,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        self.process(now, ArbiterInput::ReplyMid { game, mid })
    }

    pub fn bisect(
        &mut self,
        game: GameId,
        asserter_mid: StateClaim,
        challenger_agrees: bool,
        now: u64,
    ) -> Result<&DisputeGame, ArbiterError> {
        self.process(
            now,
            ArbiterInput::Bisect {
                game,
                asserter_mid,
                challenger_agrees,
            },
        )?;
        Ok(&self.games[&game])
    }

    pub fn one_step_verify(
        &mut self,
        game: GameId,
        opening: OneStepOpening,
        now: u64,
    ) -> Result<Verdict, ArbiterError> {
        match self.process(now, ArbiterInput::OneStep { game, opening })? {
            Output::Verdict(v) => Ok(v),
            other => unreachable!("one-step produced {other:?}"),
        }
    }

    pub fn timeout(
        &mut self,
        game: GameId,
        silent: SilentParty,
        now: u64,
    ) -> Result<Verdict, ArbiterError> {
        match self.process(now, ArbiterInput::Timeout { game, silent })? {
            Output::Verdict(v) => Ok(v),
            other => unreachable!("timeout produced {other:?}"),
        }
    }

    /// Single entry point for every mutation. Rejected inputs leave the state
    /// untouched and are not journaled.
    pub fn process(&mut self, now: u64, input: ArbiterInput) -> Result<Output, ArbiterError> {
        let out = match &input {
            ArbiterInput::Enroll { scrutineer } => {
                if !self.enrolled.insert(*scrutineer) {
                    return Err(ArbiterError::AlreadyEnrolled(*scrutineer));
                }
                Output::Done
            }
            ArbiterInput::RegisterTask { spec } => self.do_register(spec.clone(), now)?,
            ArbiterInput::SubmitClaim { claim } => self.do_submit(claim.clone(), now)?,
            ArbiterInput::Finalize { task_id } => self.do_finalize(task_id, now)?,
            ArbiterInput::OpenChallenge {
                task_id,
                asserter,
                challenger,
            } => Output::Game(self.do_open(task_id, *asserter, *challenger, now)?),
            ArbiterInput::PostMid { game, mid } => self.do_post_mid(*game, mid.clone(), now)?,
            ArbiterInput::ReplyMid { game, mid } => self.do_reply_mid(*game, mid.clone(), now)?,
            ArbiterInput::Bisect {
                game,
                asserter_mid,
                challenger_agrees,
            } => self.do_bisect(*game, asserter_mid.clone(), *challenger_agrees, now)?,
            ArbiterInput::OneStep { game, opening } => {
                self.do_one_step(*game, opening.clone(), now)?
            }
            ArbiterInput::Timeout { game, silent } => self.do_timeout(*game, *silent, now)?,
        };
        self.journal.push(JournalEntry { round: now, input });
        Ok(out)
    }

    fn emit(
        &mut self,
        round: u64,
        kind: EventKind,
        task_id: &str,
        game: Option<GameId>,
        payload: &impl Serialize,
        detail: String,
    ) {
        let payload_digest = Digest::of(
            serde_json::to_string(payload)
                .expect("payload serializes")
                .as_bytes(),
        );
        let seq = self.ledger.len() as u64;
        self.ledger.push(LedgerEvent {
            round,
            seq,
            kind,
            task_id: task_id.to_string(),
            game,
            payload_digest,
            detail,
        });
    }

    fn do_register(&mut self, spec: TaskSpec, now: u64) -> Result<Output, ArbiterError> {
        if self.tasks.contains_key(&spec.task_id) {
            return Err(ArbiterError::DuplicateTask(spec.task_id));
        }
        if spec.header.program_hash() != spec.program_hash {
            return Err(ArbiterError::BadHeader);
        }
        self.emit(
            now,
            EventKind::TaskRegistered,
            &spec.task_id,
            None,
            &spec,
            format!("steps={}", spec.header.step_count),
        );
        let record = TaskRecord {
            opened_round: now,
            deadline: now + self.config.claim_window,
            claims: Vec::new(),
            status: TaskStatus::Open,
            voided: BTreeSet::new(),
            timed_out: BTreeSet::new(),
            games: Vec::new(),
            compute_gas: 0,
            proof_gas: 0,
            spec,
        };
        self.tasks.insert(record.spec.task_id.clone(), record);
        Ok(Output::Done)
    }

    /// A claim window closes at its deadline, or early once every enrolled
    /// scrutineer has claimed.
    fn window_closed(&self, task: &TaskRecord, now: u64) -> bool {
        now >= task.deadline || self.enrolled.iter().all(|s| task.claim_of(*s).is_some())
    }

    /// Whether `finalize_task` would succeed at round `now`.
    pub fn can_finalize(&self, task_id: &str, now: u64) -> bool {
        self.tasks
            .get(task_id)
            .is_some_and(|t| t.status == TaskStatus::Open && self.window_closed(t, now))
    }

    fn verify_evidence(&self, task: &TaskRecord, claim: &Claim) -> Result<usize, ArbiterError> {
        let spec = &task.spec;
        let leaves = spec.header.step_count + 1;
        let ev = &claim.evidence;
        let bad = |m: &str| ArbiterError::InvalidEvidence(m.to_string());
        if ev.initial_proof.index != 0
            || !ev
                .initial_proof
                .verify(&claim.trace_root, &spec.initial_state_hash, leaves)
        {
            return Err(ArbiterError::InputMismatch(spec.task_id.clone()));
        }
        if ev.final_proof.index != spec.header.step_count
            || !ev
                .final_proof
                .verify(&claim.trace_root, &ev.final_state_hash, leaves)
        {
            return Err(bad("final state not committed in trace"));
        }
        let layout = &spec.header.layout;
        let hashes = ev
            .output_opening
            .verify(&ev.final_state_hash, layout)
            .map_err(|e| ArbiterError::InvalidEvidence(e.to_string()))?;
        let mut out_leaves = Vec::with_capacity(layout.output_slots.len());
        for &slot in &layout.output_slots {
            let opened = ev
                .output_opening
                .slots
                .iter()
                .find(|s| s.slot == slot)
                .ok_or_else(|| bad("output slot not opened"))?;
            out_leaves.push(slot_leaf(opened.content.as_ref()));
        }
        if output_hash_from_leaves(&out_leaves) != claim.output_hash {
            return Err(bad("output hash does not match final state"));
        }
        Ok(hashes + ev.initial_proof.siblings.len() + ev.final_proof.siblings.len())
    }

    fn do_submit(&mut self, mut claim: Claim, now: u64) -> Result<Output, ArbiterError> {
        let task = self
            .tasks
            .get(&claim.task_id)
            .ok_or_else(|| ArbiterError::UnknownTask(claim.task_id.clone()))?;
        if !self.enrolled.contains(&claim.claimant) {
            return Err(ArbiterError::NotEnrolled(claim.claimant));
        }
        if task.status != TaskStatus::Open || now >= task.deadline {
            return Err(ArbiterError::WindowClosed(claim.task_id.clone()));
        }
        if task.claim_of(claim.claimant).is_some() {
            return Err(ArbiterError::DuplicateClaim {
                task: claim.task_id.clone(),
                claimant: claim.claimant,
            });
        }
        if claim.program_hash != task.spec.program_hash {
            return Err(ArbiterError::ProgramMismatch(claim.task_id.clone()));
        }
        if claim.input_hash != task.spec.input_hash {
            return Err(ArbiterError::InputMismatch(claim.task_id.clone()));
        }
        if claim.step_count != task.spec.header.step_count {
            return Err(ArbiterError::StepCountMismatch {
                claimed: claim.step_count,
                expected: task.spec.header.step_count,
            });
        }
        let hashes = self.verify_evidence(task, &claim)?;
        claim.submission_round = now;
        let proof_gas = self.config.gas.proof_cost(hashes);
        let detail = format!(
            "{} output={}",
            claim.claimant,
            &claim.output_hash.to_hex()[..16]
        );
        self.emit(
            now,
            EventKind::ClaimSubmitted,
            &claim.task_id.clone(),
            None,
            &claim,
            detail,
        );
        let task = self.tasks.get_mut(&claim.task_id).unwrap();
        task.proof_gas += proof_gas;
        task.claims.push(claim);
        Ok(Output::Done)
    }

    fn do_finalize(&mut self, task_id: &str, now: u64) -> Result<Output, ArbiterError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| ArbiterError::UnknownTask(task_id.to_string()))?;
        if task.status != TaskStatus::Open {
            return Err(ArbiterError::AlreadyFinalized(task_id.to_string()));
        }
        if !self.window_closed(task, now) {
            return Err(ArbiterError::WindowOpen(task_id.to_string()));
        }
        let missing: Vec<ScrutineerId> = self
            .enrolled
            .iter()
            .copied()
            .filter(|s| task.claim_of(*s).is_none())
            .collect();
        for s in &missing {
            self.emit(
                now,
                EventKind::TimeoutDefault,
                task_id,
                None,
                s,
                format!("{s} made no claim"),
            );
        }
        let task = self.tasks.get_mut(task_id).unwrap();
        task.timed_out.extend(missing);
        if task.claims.is_empty() {
            task.status = TaskStatus::Failed {
                reason: "no claims".into(),
            };
            self.emit(
                now,
                EventKind::TaskFailed,
                task_id,
                None,
                &"no claims",
                "no claims".into(),
            );
            return Ok(Output::Finalized(FinalizeOutcome::Failed));
        }
        task.status = TaskStatus::Disputed;
        Ok(Output::Finalized(self.advance(task_id, now)))
    }

    /// Accepts the task if the surviving claims agree, otherwise opens the next
    /// batch of games: the earliest surviving claim against the first claim of
    /// every other surviving result.
    fn advance(&mut self, task_id: &str, now: u64) -> FinalizeOutcome {
        let task = &self.tasks[task_id];
        if task.games.iter().any(|g| !self.games[g].is_resolved()) {
            return FinalizeOutcome::Disputed(Vec::new());
        }
        let mut classes: Vec<&Claim> = Vec::new();
        for c in task.surviving() {
            if !classes
                .iter()
                .any(|k| k.evidence.final_state_hash == c.evidence.final_state_hash)
            {
                classes.push(c);
            }
        }
        let distinct_roots = task
            .surviving()
            .map(|c| c.commitment())
            .collect::<BTreeSet<_>>()
            .len();
        match classes.len() {
            0 => {
                let t = self.tasks.get_mut(task_id).unwrap();
                t.status = TaskStatus::Failed {
                    reason: "every claim voided".into(),
                };
                self.emit(
                    now,
                    EventKind::TaskFailed,
                    task_id,
                    None,
                    &"voided",
                    "every claim voided".into(),
                );
                FinalizeOutcome::Failed
            }
            1 => {
                let commitment = classes[0].commitment();
                let after_dispute = !task.games.is_empty() || distinct_roots > 1;
                let t = self.tasks.get_mut(task_id).unwrap();
                t.status = TaskStatus::Accepted {
                    commitment,
                    after_dispute,
                };
                let detail = format!(
                    "output={} recompute_gas={}",
                    &commitment.output_hash.to_hex()[..16],
                    t.compute_gas
                );
                self.emit(now, EventKind::Accepted, task_id, None, &commitment, detail);
                FinalizeOutcome::Accepted(commitment.output_hash)
            }
            _ => {
                let asserter = classes[0].claimant;
                let challengers: Vec<ScrutineerId> =
                    classes[1..].iter().map(|c| c.claimant).collect();
                let games = challengers
                    .into_iter()
                    .map(|c| {
                        self.do_open(task_id, asserter, c, now)
                            .expect("conflicting survivors can be paired")
                    })
                    .collect();
                FinalizeOutcome::Disputed(games)
            }
        }
    }

    fn do_open(
        &mut self,
        task_id: &str,
        asserter: ScrutineerId,
        challenger: ScrutineerId,
        now: u64,
    ) -> Result<GameId, ArbiterError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| ArbiterError::UnknownTask(task_id.to_string()))?;
        if task.is_final() {
            return Err(ArbiterError::AlreadyFinalized(task_id.to_string()));
        }
        let a = task
            .claim_of(asserter)
            .ok_or(ArbiterError::NoSuchClaim(asserter))?;
        let c = task
            .claim_of(challenger)
            .ok_or(ArbiterError::NoSuchClaim(challenger))?;
        if a.evidence.final_state_hash == c.evidence.final_state_hash
            || task.voided.contains(&asserter)
            || task.voided.contains(&challenger)
        {
            return Err(ArbiterError::NonConflicting);
        }
        let exists = task.games.iter().any(|g| {
            let g = &self.games[g];
            (g.asserter == asserter && g.challenger == challenger)
                || (g.asserter == challenger && g.challenger == asserter)
        });
        if exists {
            return Err(ArbiterError::GameExists);
        }
        let t = task.spec.header.step_count;
        let id = self.next_game;
        let game = DisputeGame {
            id,
            task_id: task_id.to_string(),
            asserter,
            challenger,
            asserter_root: a.trace_root,
            challenger_root: c.trace_root,
            step_count: t,
            lo: 0,
            hi: t,
            lo_hash: task.spec.initial_state_hash,
            hi_hash: a.evidence.final_state_hash,
            phase: if t == 1 {
                Phase::OneStep
            } else {
                Phase::Bisecting
            },
            awaiting: Party::Asserter,
            pending_mid: None,
            deadline: now + self.config.timeout_rounds,
            rounds_elapsed: 0,
            verdict: None,
            reason: None,
            compute_gas: 0,
            proof_gas: 0,
            one_step_gas: 0,
        };
        self.next_game += 1;
        let detail = format!("{asserter} vs {challenger} window [0,{t}]");
        self.emit(
            now,
            EventKind::ChallengeOpened,
            task_id,
            Some(id),
            &(asserter, challenger, a.trace_root, c.trace_root),
            detail,
        );
        self.games.insert(id, game);
        let task = self.tasks.get_mut(task_id).unwrap();
        task.games.push(id);
        if task.status == TaskStatus::Open {
            task.status = TaskStatus::Disputed;
        }
        Ok(id)
    }

    fn live_game(&self, id: GameId) -> Result<&DisputeGame, ArbiterError> {
        let g = self.games.get(&id).ok_or(ArbiterError::UnknownGame(id))?;
        if g.is_resolved() {
            return Err(ArbiterError::AlreadyResolved(id));
        }
        Ok(g)
    }

    fn check_mid(
        &self,
        g: &DisputeGame,
        mid: &StateClaim,
        party: Party,
    ) -> Result<(), ArbiterError> {
        if mid.index != g.mid()
            || !mid
                .proof
                .verify(&g.root_of(party), &mid.hash, g.step_count + 1)
            || mid.proof.index != mid.index
        {
            return Err(ArbiterError::MalformedProof);
        }
        Ok(())
    }

    fn charge_proof(&mut self, game: GameId, hashes: usize) {
        let gas = self.config.gas.proof_cost(hashes);
        let g = self.games.get_mut(&game).unwrap();
        g.proof_gas += gas;
        let task_id = g.task_id.clone();
        self.tasks.get_mut(&task_id).unwrap().proof_gas += gas;
    }

    fn do_post_mid(
        &mut self,
        game: GameId,
        mid: StateClaim,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        let g = self.live_game(game)?;
        if g.phase != Phase::Bisecting || g.awaiting != Party::Asserter {
            return Err(ArbiterError::OutOfTurn);
        }
        if self.check_mid(g, &mid, Party::Asserter).is_err() {
            return Ok(Output::Verdict(self.resolve(
                game,
                Verdict::ChallengerWins,
                VerdictReason::InvalidProof(Party::Asserter),
                now,
            )));
        }
        self.charge_proof(game, mid.proof.siblings.len());
        let timeout = self.config.timeout_rounds;
        let g = self.games.get_mut(&game).unwrap();
        g.pending_mid = Some(mid);
        g.awaiting = Party::Challenger;
        g.deadline = now + timeout;
        Ok(Output::Done)
    }

    fn do_reply_mid(
        &mut self,
        game: GameId,
        mid: StateClaim,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        let g = self.live_game(game)?;
        if g.phase != Phase::Bisecting || g.awaiting != Party::Challenger {
            return Err(ArbiterError::OutOfTurn);
        }
        if self.check_mid(g, &mid, Party::Challenger).is_err() {
            return Ok(Output::Verdict(self.resolve(
                game,
                Verdict::AsserterWins,
                VerdictReason::InvalidProof(Party::Challenger),
                now,
            )));
        }
        let asserter_mid = g.pending_mid.clone().expect("asserter posted first");
        let agrees = asserter_mid.hash == mid.hash;
        self.charge_proof(game, mid.proof.siblings.len());
        self.do_bisect(game, asserter_mid, agrees, now)
    }

    fn do_bisect(
        &mut self,
        game: GameId,
        asserter_mid: StateClaim,
        agrees: bool,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        let g = self.live_game(game)?;
        if g.phase != Phase::Bisecting {
            return Err(ArbiterError::OutOfTurn);
        }
        self.check_mid(g, &asserter_mid, Party::Asserter)?;
        let timeout = self.config.timeout_rounds;
        let g = self.games.get_mut(&game).unwrap();
        let mid = g.mid();
        if agrees {
            g.lo = mid;
            g.lo_hash = asserter_mid.hash;
        } else {
            g.hi = mid;
            g.hi_hash = asserter_mid.hash;
        }
        g.rounds_elapsed += 1;
        g.pending_mid = None;
        g.awaiting = Party::Asserter;
        g.deadline = now + timeout;
        if g.hi - g.lo == 1 {
            g.phase = Phase::OneStep;
        }
        let (lo, hi, phase, task) = (g.lo, g.hi, g.phase, g.task_id.clone());
        let detail = format!(
            "mid={mid} {} -> [{lo},{hi}]",
            if agrees { "agree" } else { "disagree" }
        );
        self.emit(
            now,
            EventKind::Bisection,
            &task,
            Some(game),
            &(asserter_mid, agrees),
            detail,
        );
        Ok(Output::Window { lo, hi, phase })
    }

    fn do_one_step(
        &mut self,
        game: GameId,
        opening: OneStepOpening,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        let g = self.live_game(game)?;
        if g.phase != Phase::OneStep {
            return Err(ArbiterError::OutOfTurn);
        }
        let task = &self.tasks[&g.task_id];
        let header = &task.spec.header;
        let invalid = |arb: &mut Self| {
            Ok(Output::Verdict(arb.resolve(
                game,
                Verdict::ChallengerWins,
                VerdictReason::InvalidProof(Party::Asserter),
                now,
            )))
        };
        let op_ok = opening.op_proof.index == g.lo
            && opening
                .op_proof
                .verify(&header.ops_root, &opening.op.digest(), header.step_count);
        if !op_ok {
            return invalid(self);
        }
        let Ok(slot_hashes) = opening.pre_state.verify(&g.lo_hash, &header.layout) else {
            return invalid(self);
        };
        let Ok(post) = opening.pre_state.successor_hash(&opening.op) else {
            return invalid(self);
        };
        let verdict = if post == g.hi_hash {
            Verdict::AsserterWins
        } else {
            Verdict::ChallengerWins
        };
        let compute = opening.op.cost;
        let proof_hashes = slot_hashes + opening.op_proof.siblings.len();
        let proof_gas = self.config.gas.proof_cost(proof_hashes);
        let g = self.games.get_mut(&game).unwrap();
        g.rounds_elapsed += 1;
        g.compute_gas += compute;
        g.proof_gas += proof_gas;
        g.one_step_gas = compute + proof_gas;
        let task_id = g.task_id.clone();
        let lo = g.lo;
        let t = self.tasks.get_mut(&task_id).unwrap();
        t.compute_gas += compute;
        t.proof_gas += proof_gas;
        let detail = format!("step {lo} re-executed, cost={compute} proof_gas={proof_gas}");
        self.emit(
            now,
            EventKind::OneStepVerified,
            &task_id,
            Some(game),
            &opening,
            detail,
        );
        Ok(Output::Verdict(self.resolve(
            game,
            verdict,
            VerdictReason::OneStep,
            now,
        )))
    }

    fn do_timeout(
        &mut self,
        game: GameId,
        silent: SilentParty,
        now: u64,
    ) -> Result<Output, ArbiterError> {
        let g = self.live_game(game)?;
        if now < g.deadline {
            return Err(ArbiterError::DeadlineNotReached);
        }
        let verdict = match silent {
            SilentParty::Challenger => Verdict::AsserterWins,
            SilentParty::Asserter | SilentParty::Both => Verdict::ChallengerWins,
        };
        let task = g.task_id.clone();
        self.emit(
            now,
            EventKind::TimeoutDefault,
            &task,
            Some(game),
            &silent,
            format!("{silent:?} silent"),
        );
        Ok(Output::Verdict(self.resolve(
            game,
            verdict,
            VerdictReason::Timeout(silent),
            now,
        )))
    }

    fn resolve(
        &mut self,
        game: GameId,
        verdict: Verdict,
        reason: VerdictReason,
        now: u64,
    ) -> Verdict {
        let g = self.games.get_mut(&game).unwrap();
        g.phase = Phase::Resolved;
        g.verdict = Some(verdict);
        g.reason = Some(reason.clone());
        if reason == VerdictReason::OneStep {
            assert!(
                g.rounds_elapsed <= g.round_bound(),
                "dispute exceeded ceil(log2 T)+1 rounds"
            );
        }
        let loser = g.party_id(verdict.loser());
        let task_id = g.task_id.clone();
        let detail = format!(
            "{verdict:?} ({reason:?}), {loser} voided, rounds={}",
            g.rounds_elapsed
        );
        self.emit(
            now,
            EventKind::Verdict,
            &task_id,
            Some(game),
            &(verdict, &reason),
            detail,
        );

        let task = self.tasks.get_mut(&task_id).unwrap();
        let lost = task.claim_of(loser).map(Claim::commitment);
        let voided: Vec<ScrutineerId> = task
            .claims
            .iter()
            .filter(|c| Some(c.commitment()) == lost)
            .map(|c| c.claimant)
            .collect();
        task.voided.extend(voided);
        if task.status == TaskStatus::Disputed {
            self.advance(&task_id, now);
        }
        verdict
    }

    /// Verdicts entered for a task, in game order.
    pub fn verdicts(&self, task_id: &str) -> Vec<(GameId, Verdict, ScrutineerId)> {
        self.games_for(task_id)
            .into_iter()
            .filter_map(|g| Some((g.id, g.verdict?, g.loser()?)))
            .collect()
    }

    /// Tree height of a task's trace, used for gas bounds.
    pub fn trace_height(&self, task_id: &str) -> Option<u32> {
        self.tasks
            .get(task_id)
            .map(|t| tree_height(t.spec.header.step_count as usize + 1))
    }
}
