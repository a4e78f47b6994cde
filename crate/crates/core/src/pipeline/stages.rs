//! Counting stages: signature verification, extraction, tabulation and
//! publication, each model evaluation a committee task.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ballots::{sub_seed, BallotPaper, Envelope, ReadVote, Registry};
use super::models::{class_of, local_distance, local_read, reader_inputs, signature_inputs};
use super::models::{READER_MODEL, SIGNATURE_MODEL};
use super::PipelineError;
use crate::committee::{TaskInput, World};
use crate::provenance::{AuditedRegistry, Model};
use crate::vm::{FixedPoint, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureDecision {
    Accept,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureCheck {
    pub voter_id: String,
    /// Empty when no task ran.
    pub task_id: String,
    pub distance: Option<FixedPoint>,
    pub decision: SignatureDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Decision from a distance: accept iff `distance < tau`.
pub fn decide(distance: FixedPoint, tau: FixedPoint) -> SignatureDecision {
    if distance < tau {
        SignatureDecision::Accept
    } else {
        SignatureDecision::Reject
    }
}

/// Class index to a read; anything at or past `candidates` is
/// unidentifiable.
pub fn decode(class: u32, candidates: u32) -> ReadVote {
    if class < candidates {
        ReadVote::Candidate(class)
    } else {
        ReadVote::Unidentifiable
    }
}

fn audited<'a>(models: &'a AuditedRegistry, name: &str) -> Result<&'a Model, PipelineError> {
    models
        .get(name)
        .ok_or_else(|| PipelineError::Unaudited(name.into()))
}

fn unknown(e: &Envelope, reason: &str) -> SignatureCheck {
    SignatureCheck {
        voter_id: e.voter_id.clone(),
        task_id: String::new(),
        distance: None,
        decision: SignatureDecision::Reject,
        reason: Some(reason.into()),
    }
}

/// Compares each envelope's signature with the registered reference through
/// one committee task per envelope. The decision depends only on the
/// committee-accepted distance.
pub fn verify_signatures(
    envelopes: &[Envelope],
    registry: &Registry,
    program: &Arc<Program>,
    models: &AuditedRegistry,
    tau: FixedPoint,
    world: &mut World,
) -> Result<Vec<SignatureCheck>, PipelineError> {
    let model = audited(models, SIGNATURE_MODEL)?;
    let mut tasks = Vec::new();
    for e in envelopes {
        if let (Some(v), Some(scan)) = (registry.get(&e.voter_id), &e.scanned_signature) {
            let inputs = signature_inputs(model, &v.reference_signature, scan);
            tasks.push(TaskInput::new(
                format!("sig/{}", e.voter_id),
                program.clone(),
                inputs,
            ));
        }
    }
    let outcomes = world.run_tasks(&tasks)?;
    let mut outcomes = outcomes.into_iter();
    envelopes
        .iter()
        .map(|e| {
            if registry.get(&e.voter_id).is_none() {
                return Ok(unknown(e, "unknown voter id"));
            }
            if e.scanned_signature.is_none() {
                return Ok(unknown(e, "unsigned envelope"));
            }
            let o = outcomes.next().expect("one outcome per task");
            let outputs = o
                .outputs
                .as_ref()
                .ok_or_else(|| PipelineError::Unresolved(o.task_id.clone()))?;
            let distance = outputs["distance"].data()[0];
            Ok(SignatureCheck {
                voter_id: e.voter_id.clone(),
                task_id: o.task_id,
                distance: Some(distance),
                decision: decide(distance, tau),
                reason: None,
            })
        })
        .collect()
}

/// The same decisions computed on one machine.
pub fn local_signature_checks(
    envelopes: &[Envelope],
    registry: &Registry,
    program: &Program,
    model: &Model,
    tau: FixedPoint,
) -> Result<Vec<SignatureCheck>, PipelineError> {
    envelopes
        .iter()
        .map(|e| {
            let (Some(v), Some(scan)) = (registry.get(&e.voter_id), &e.scanned_signature) else {
                return Ok(unknown(
                    e,
                    if registry.get(&e.voter_id).is_none() {
                        "unknown voter id"
                    } else {
                        "unsigned envelope"
                    },
                ));
            };
            let distance = local_distance(program, model, &v.reference_signature, scan)?;
            Ok(SignatureCheck {
                voter_id: e.voter_id.clone(),
                task_id: String::new(),
                distance: Some(distance),
                decision: decide(distance, tau),
                reason: None,
            })
        })
        .collect()
}

/// Opens accepted envelopes into one ballot box, shuffled by a seeded
/// permutation. All envelopes are consumed; rejected ones are discarded
/// unopened.
pub fn extract_ballots(
    envelopes: Vec<Envelope>,
    checks: &[SignatureCheck],
    seed: u64,
) -> Vec<BallotPaper> {
    let accepted: BTreeSet<&str> = checks
        .iter()
        .filter(|c| c.decision == SignatureDecision::Accept)
        .map(|c| c.voter_id.as_str())
        .collect();
    let mut papers: Vec<BallotPaper> = envelopes
        .into_iter()
        .filter(|e| accepted.contains(e.voter_id.as_str()))
        .map(|e| e.ballot)
        .collect();
    papers.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "shuffle")));
    papers
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyResult {
    /// Machine-read votes per candidate.
    pub counts: Vec<u64>,
    /// Size of the manual-review queue.
    pub unidentifiable: u64,
    /// Manual-review outcomes per candidate.
    pub manual_resolved: Vec<u64>,
    /// Queue entries no reviewer could assign.
    pub manual_spoiled: u64,
    pub rejected_signature: u64,
    /// Envelopes ingested.
    pub total_processed: u64,
    pub papers_tabulated: u64,
}

impl TallyResult {
    /// Machine reads plus manual resolutions.
    pub fn totals(&self) -> Vec<u64> {
        self.counts
            .iter()
            .zip(&self.manual_resolved)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn conserved(&self) -> bool {
        self.counts.iter().sum::<u64>() + self.unidentifiable == self.papers_tabulated
            && self.manual_resolved.iter().sum::<u64>() + self.manual_spoiled == self.unidentifiable
            && self.papers_tabulated + self.rejected_signature == self.total_processed
    }
}

/// Aggregates reads; unidentifiable papers are resolved from their manual
/// label.
pub fn tally(
    papers: &[BallotPaper],
    candidates: u32,
    envelopes: u64,
    rejected: u64,
) -> TallyResult {
    let mut t = TallyResult {
        counts: vec![0; candidates as usize],
        manual_resolved: vec![0; candidates as usize],
        rejected_signature: rejected,
        total_processed: envelopes,
        papers_tabulated: papers.len() as u64,
        ..TallyResult::default()
    };
    for p in papers {
        match p.read_vote.expect("every paper read") {
            ReadVote::Candidate(c) => t.counts[c as usize] += 1,
            ReadVote::Unidentifiable => {
                t.unidentifiable += 1;
                match p.manual_label.filter(|&c| c < candidates) {
                    Some(c) => t.manual_resolved[c as usize] += 1,
                    None => t.manual_spoiled += 1,
                }
            }
        }
    }
    t
}

/// Reads every paper through one committee task each, in box order.
pub fn tabulate(
    mut papers: Vec<BallotPaper>,
    program: &Arc<Program>,
    models: &AuditedRegistry,
    candidates: u32,
    world: &mut World,
) -> Result<Vec<BallotPaper>, PipelineError> {
    let model = audited(models, READER_MODEL)?;
    let tasks: Vec<TaskInput> = papers
        .iter()
        .enumerate()
        .map(|(i, p)| {
            TaskInput::new(
                format!("read/{i:04}"),
                program.clone(),
                reader_inputs(model, &p.mark_image),
            )
        })
        .collect();
    for (p, o) in papers.iter_mut().zip(world.run_tasks(&tasks)?) {
        let outputs = o
            .outputs
            .as_ref()
            .ok_or_else(|| PipelineError::Unresolved(o.task_id.clone()))?;
        p.read_vote = Some(decode(class_of(outputs), candidates));
    }
    Ok(papers)
}

pub fn local_tabulate(
    mut papers: Vec<BallotPaper>,
    program: &Program,
    model: &Model,
    candidates: u32,
) -> Result<Vec<BallotPaper>, PipelineError> {
    for p in &mut papers {
        p.read_vote = Some(decode(
            local_read(program, model, &p.mark_image)?,
            candidates,
        ));
    }
    Ok(papers)
}
