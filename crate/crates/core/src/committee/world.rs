use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::profile::{CommitteeConfig, Strategy};
use super::prover::{Fabrication, Prover};
use crate::arbiter::{
    Arbiter, ArbiterConfig, ArbiterError, ArbiterInput, Commitment, GameId, Party, Phase,
    ScrutineerId, SilentParty, TaskId, TaskSpec, TaskStatus, Verdict, VerdictReason,
};
use crate::hash::Digest;
use crate::vm::trace::{ExecError, NamedTensors};
use crate::vm::Program;

/// A computation handed to the committee.
#[derive(Clone, Debug)]
pub struct TaskInput {
    pub task_id: TaskId,
    pub program: Arc<Program>,
    pub inputs: Arc<NamedTensors>,
}

impl TaskInput {
    pub fn new(task_id: impl Into<TaskId>, program: Arc<Program>, inputs: NamedTensors) -> Self {
        TaskInput {
            task_id: task_id.into(),
            program,
            inputs: Arc::new(inputs),
        }
    }

    /// The public registration record; computable by anyone holding the task.
    pub fn spec(&self) -> Result<TaskSpec, ExecError> {
        Ok(TaskSpec {
            task_id: self.task_id.clone(),
            program_hash: self.program.hash(),
            header: self.program.header(),
            input_hash: self.program.input_hash(&self.inputs)?,
            initial_state_hash: self.program.initial_state(&self.inputs)?.state_hash(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Claim,
    BisectResponse,
    OneStepOpening,
    Noop,
}

/// A scrutineer-to-arbiter message, delivered at the start of the round
/// after `round`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMessage {
    pub round: u64,
    pub from: ScrutineerId,
    pub to: String,
    pub kind: PayloadKind,
    pub task_id: TaskId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub game: Option<GameId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub payload_digest: Option<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub round: u64,
    pub from: ScrutineerId,
    pub task_id: TaskId,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameSummary {
    pub game: GameId,
    pub asserter: ScrutineerId,
    pub challenger: ScrutineerId,
    pub verdict: Option<Verdict>,
    pub reason: Option<VerdictReason>,
    pub loser: Option<ScrutineerId>,
    /// Final window `[lo, hi]`.
    pub window: (u64, u64),
    pub rounds_elapsed: u32,
    pub round_bound: u32,
    pub compute_gas: u64,
    pub proof_gas: u64,
    pub one_step_gas: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskOutcome {
    pub task_id: TaskId,
    pub accepted: Option<Commitment>,
    /// Output tensors opened by the accepted claim.
    pub outputs: Option<NamedTensors>,
    pub voided: Vec<ScrutineerId>,
    pub timed_out: Vec<ScrutineerId>,
    pub games: Vec<GameSummary>,
    pub compute_gas: u64,
    pub proof_gas: u64,
    pub opened_round: u64,
    pub closed_round: u64,
    pub failure: Option<String>,
}

impl TaskOutcome {
    pub fn accepted_output(&self) -> Option<Digest> {
        self.accepted.map(|c| c.output_hash)
    }

    /// Simulation rounds from registration to finalization, inclusive.
    pub fn rounds(&self) -> u64 {
        self.closed_round - self.opened_round + 1
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Arbiter(#[from] ArbiterError),
    #[error("task `{0}` is not known to this world")]
    UnknownTask(TaskId),
    #[error("task `{task}` unresolved after {rounds} rounds")]
    Deadlock { task: TaskId, rounds: u64 },
}

struct TaskContext {
    provers: BTreeMap<ScrutineerId, Arc<Prover>>,
}

struct Pending {
    msg: SimMessage,
    input: Option<ArbiterInput>,
}

/// Upper bound on rounds any task may take before the run is declared stuck.
pub const MAX_TASK_ROUNDS: u64 = 10_000;

/// Committee, arbiter and the synchronous network between them.
pub struct World {
    round: u64,
    arbiter: Arbiter,
    committee: CommitteeConfig,
    parallel: bool,
    contexts: BTreeMap<TaskId, TaskContext>,
    outbox: Vec<Pending>,
    transcript: Vec<SimMessage>,
    rejections: Vec<Rejection>,
    acted: BTreeSet<(TaskId, ScrutineerId)>,
    closed: BTreeMap<TaskId, u64>,
}

impl World {
    pub fn new(committee: CommitteeConfig, arbiter: ArbiterConfig) -> Self {
        let mut a = Arbiter::new(arbiter);
        for p in committee.profiles() {
            a.enroll(p.id).expect("committee ids are unique");
        }
        World {
            round: 0,
            arbiter: a,
            committee,
            parallel: false,
            contexts: BTreeMap::new(),
            outbox: Vec::new(),
            transcript: Vec::new(),
            rejections: Vec::new(),
            acted: BTreeSet::new(),
            closed: BTreeMap::new(),
        }
    }

    /// Evaluate scrutineers' local executions on the rayon pool. Results are
    /// merged in scrutineer-id order, so outputs are unchanged.
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn arbiter(&self) -> &Arbiter {
        &self.arbiter
    }

    pub fn committee(&self) -> &CommitteeConfig {
        &self.committee
    }

    pub fn transcript(&self) -> &[SimMessage] {
        &self.transcript
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    pub fn transcript_jsonl(&self) -> String {
        let mut s = String::new();
        for m in &self.transcript {
            s.push_str(&serde_json::to_string(m).expect("messages serialize"));
            s.push('\n');
        }
        s
    }

    /// Registers tasks with the arbiter and computes every member's local trace.
    pub fn register(&mut self, tasks: &[TaskInput]) -> Result<(), RunError> {
        let specs = tasks
            .iter()
            .map(TaskInput::spec)
            .collect::<Result<Vec<_>, _>>()?;
        let mut jobs: BTreeSet<(usize, Fabrication)> = BTreeSet::new();
        for (i, t) in tasks.iter().enumerate() {
            for p in self.committee.profiles() {
                if let Some(f) = p.strategy.fabrication(&t.task_id) {
                    jobs.insert((i, f.effective(t.program.step_count())));
                }
            }
        }
        let jobs: Vec<(usize, Fabrication)> = jobs.into_iter().collect();
        let build = |&(i, f): &(usize, Fabrication)| {
            Prover::new(tasks[i].program.clone(), tasks[i].inputs.clone(), f).map(Arc::new)
        };
        let built: Vec<Result<Arc<Prover>, ExecError>> = if self.parallel {
            jobs.par_iter().map(build).collect()
        } else {
            jobs.iter().map(build).collect()
        };
        let mut provers: BTreeMap<(usize, Fabrication), Arc<Prover>> = BTreeMap::new();
        for (job, p) in jobs.into_iter().zip(built) {
            provers.insert(job, p?);
        }
        for (i, (t, spec)) in tasks.iter().zip(specs).enumerate() {
            self.arbiter.register_task(spec, self.round)?;
            let mut ctx = TaskContext {
                provers: BTreeMap::new(),
            };
            for p in self.committee.profiles() {
                if let Some(f) = p.strategy.fabrication(&t.task_id) {
                    let key = (i, f.effective(t.program.step_count()));
                    ctx.provers.insert(p.id, provers[&key].clone());
                }
            }
            self.contexts.insert(t.task_id.clone(), ctx);
        }
        Ok(())
    }

    /// Delivers last round's messages, lets the arbiter close windows and
    /// expire deadlines, lets every scrutineer act once, then advances the
    /// round counter.
    pub fn run_round(&mut self) {
        let now = self.round;
        for p in std::mem::take(&mut self.outbox) {
            if let Some(input) = p.input {
                if let Err(e) = self.arbiter.process(now, input) {
                    self.rejections.push(Rejection {
                        round: now,
                        from: p.msg.from,
                        task_id: p.msg.task_id,
                        error: e.to_string(),
                    });
                }
            }
        }

        let ready: Vec<TaskId> = self
            .contexts
            .keys()
            .filter(|t| self.arbiter.can_finalize(t, now))
            .cloned()
            .collect();
        for t in ready {
            self.arbiter
                .finalize_task(&t, now)
                .expect("window closed and task open");
        }
        let expired: Vec<(GameId, Party)> = self
            .arbiter
            .games()
            .filter(|g| !g.is_resolved() && now >= g.deadline)
            .map(|g| (g.id, g.awaiting))
            .collect();
        for (g, party) in expired {
            let silent = match party {
                Party::Asserter => SilentParty::Asserter,
                Party::Challenger => SilentParty::Challenger,
            };
            // A game resolved earlier in this loop cannot expire again.
            let _ = self.arbiter.timeout(g, silent, now);
        }
        for t in self.contexts.keys() {
            if !self.closed.contains_key(t) && self.arbiter.task(t).is_some_and(|r| r.is_final()) {
                self.closed.insert(t.clone(), now);
            }
        }

        let ids: Vec<ScrutineerId> = self.committee.profiles().iter().map(|p| p.id).collect();
        for id in ids {
            let sent = self.act(id, now);
            for p in sent {
                self.transcript.push(p.msg.clone());
                self.outbox.push(p);
            }
        }
        self.round += 1;
    }

    fn prover_for(&self, task: &str, id: ScrutineerId) -> Option<&Arc<Prover>> {
        let ctx = self.contexts.get(task)?;
        let mut who = id;
        for _ in 0..=self.committee.len() {
            match &self.committee.profile(who)?.strategy {
                Strategy::LazyCopy { peer } => who = *peer,
                Strategy::Silent => return None,
                _ => return ctx.provers.get(&who),
            }
        }
        None
    }

    fn message(
        now: u64,
        from: ScrutineerId,
        kind: PayloadKind,
        task: &str,
        game: Option<GameId>,
        input: Option<ArbiterInput>,
    ) -> Pending {
        let payload_digest = input.as_ref().map(|i| {
            Digest::of(
                serde_json::to_string(i)
                    .expect("inputs serialize")
                    .as_bytes(),
            )
        });
        Pending {
            msg: SimMessage {
                round: now,
                from,
                to: "arbiter".into(),
                kind,
                task_id: task.to_string(),
                game,
                payload_digest,
            },
            input,
        }
    }

    fn act(&mut self, id: ScrutineerId, now: u64) -> Vec<Pending> {
        let strategy = self.committee.profile(id).expect("member").strategy.clone();
        let mut out = Vec::new();
        let mut acted = Vec::new();
        for task in self.contexts.keys() {
            let Some(rec) = self.arbiter.task(task) else {
                continue;
            };
            if rec.status != TaskStatus::Open || self.acted.contains(&(task.clone(), id)) {
                continue;
            }
            let claim = match &strategy {
                Strategy::Silent => None,
                Strategy::LazyCopy { peer } => match rec.claim_of(*peer) {
                    Some(c) => Some(crate::arbiter::Claim {
                        claimant: id,
                        ..c.clone()
                    }),
                    None => continue,
                },
                _ => self.prover_for(task, id).map(|p| p.claim(task, id)),
            };
            acted.push((task.clone(), id));
            match claim {
                Some(claim) => out.push(Self::message(
                    now,
                    id,
                    PayloadKind::Claim,
                    task,
                    None,
                    Some(ArbiterInput::SubmitClaim { claim }),
                )),
                None => out.push(Self::message(now, id, PayloadKind::Noop, task, None, None)),
            }
        }
        self.acted.extend(acted);

        for g in self.arbiter.games().filter(|g| !g.is_resolved()) {
            if g.asserter != id && g.challenger != id {
                continue;
            }
            let Some(prover) = self.prover_for(&g.task_id, id) else {
                out.push(Self::message(
                    now,
                    id,
                    PayloadKind::Noop,
                    &g.task_id,
                    Some(g.id),
                    None,
                ));
                continue;
            };
            let input = match (g.phase, g.awaiting) {
                (Phase::Bisecting, Party::Asserter) if id == g.asserter => ArbiterInput::PostMid {
                    game: g.id,
                    mid: prover.state_claim(g.mid()),
                },
                (Phase::Bisecting, Party::Challenger) if id == g.challenger => {
                    ArbiterInput::ReplyMid {
                        game: g.id,
                        mid: prover.state_claim(g.mid()),
                    }
                }
                (Phase::OneStep, _) if id == g.asserter => ArbiterInput::OneStep {
                    game: g.id,
                    opening: prover.one_step(g.lo),
                },
                _ => continue,
            };
            let kind = match input {
                ArbiterInput::OneStep { .. } => PayloadKind::OneStepOpening,
                _ => PayloadKind::BisectResponse,
            };
            out.push(Self::message(
                now,
                id,
                kind,
                &g.task_id,
                Some(g.id),
                Some(input),
            ));
        }
        out
    }

    /// Runs rounds until every listed task is finalized.
    pub fn run_until_final(&mut self, tasks: &[TaskId]) -> Result<(), RunError> {
        let start = self.round;
        loop {
            let pending = tasks
                .iter()
                .find(|t| !self.arbiter.task(t).is_some_and(|r| r.is_final()));
            let Some(t) = pending else { return Ok(()) };
            if self.round - start >= MAX_TASK_ROUNDS {
                return Err(RunError::Deadlock {
                    task: t.clone(),
                    rounds: self.round - start,
                });
            }
            self.run_round();
        }
    }

    pub fn outcome(&self, task: &str) -> Option<TaskOutcome> {
        let rec = self.arbiter.task(task)?;
        let accepted = rec.accepted().copied();
        let outputs = accepted.and_then(|c| {
            let claim = rec.claims.iter().find(|k| k.commitment() == c)?;
            let layout = &rec.spec.header.layout;
            let opening = &claim.evidence.output_opening;
            layout
                .output_names
                .iter()
                .zip(&layout.output_slots)
                .map(|(n, s)| {
                    let t = opening
                        .slots
                        .iter()
                        .find(|o| o.slot == *s)?
                        .content
                        .clone()?;
                    Some((n.clone(), t))
                })
                .collect::<Option<NamedTensors>>()
        });
        let games = self
            .arbiter
            .games_for(task)
            .into_iter()
            .map(|g| GameSummary {
                game: g.id,
                asserter: g.asserter,
                challenger: g.challenger,
                verdict: g.verdict,
                reason: g.reason.clone(),
                loser: g.loser(),
                window: (g.lo, g.hi),
                rounds_elapsed: g.rounds_elapsed,
                round_bound: g.round_bound(),
                compute_gas: g.compute_gas,
                proof_gas: g.proof_gas,
                one_step_gas: g.one_step_gas,
            })
            .collect();
        Some(TaskOutcome {
            task_id: task.to_string(),
            accepted,
            outputs,
            voided: rec.voided.iter().copied().collect(),
            timed_out: rec.timed_out.iter().copied().collect(),
            games,
            compute_gas: rec.compute_gas,
            proof_gas: rec.proof_gas,
            opened_round: rec.opened_round,
            closed_round: self.closed.get(task).copied().unwrap_or(self.round),
            failure: match &rec.status {
                TaskStatus::Failed { reason } => Some(reason.clone()),
                _ => None,
            },
        })
    }

    /// Registers a batch, drives it to finality and returns outcomes in
    /// input order. Local traces are dropped afterwards.
    pub fn run_tasks(&mut self, tasks: &[TaskInput]) -> Result<Vec<TaskOutcome>, RunError> {
        self.register(tasks)?;
        let ids: Vec<TaskId> = tasks.iter().map(|t| t.task_id.clone()).collect();
        self.run_until_final(&ids)?;
        let outcomes = ids
            .iter()
            .map(|t| {
                self.outcome(t)
                    .ok_or_else(|| RunError::UnknownTask(t.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for t in &ids {
            self.contexts.remove(t);
        }
        Ok(outcomes)
    }

    pub fn run_task(&mut self, task: &TaskInput) -> Result<TaskOutcome, RunError> {
        Ok(self.run_tasks(std::slice::from_ref(task))?.remove(0))
    }

    pub fn ledger_digest(&self) -> Digest {
        self.arbiter.ledger_digest()
    }
}
