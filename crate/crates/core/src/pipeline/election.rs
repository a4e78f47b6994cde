//! End-to-end election: audited models, the five stages, the report, and
//! the local oracle it must agree with.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::audit::{audit_links, LinkAudit};
use super::ballots::{
    cast_votes, plan_votes, produce_ballots, register_voters, sub_seed, BallotPaper, Envelope,
    ReadVote, Registry, VotePlan,
};
use super::config::ElectionConfig;
use super::models::{
    reader_m0, reader_program, reader_spec, reader_training_stream, signature_m0,
    signature_program, signature_training_stream, READER_MODEL, SIGNATURE_MODEL,
};
use super::stages::{
    extract_ballots, local_signature_checks, local_tabulate, tabulate, tally, verify_signatures,
    SignatureCheck, SignatureDecision, TallyResult,
};
use super::PipelineError;
use crate::committee::World;
use crate::hash::Digest;
use crate::provenance::{
    audit, bind_models, train_local, train_model, AuditedRegistry, Hyperparams, Minibatch, Model,
    ProvenanceRecord,
};
use crate::vm::{FixedPoint, Program};

/// Initial models and their committed training streams.
pub struct TrainingPlan {
    pub m0: Vec<Model>,
    pub data: Vec<Vec<Minibatch>>,
    pub hyperparams: Vec<Hyperparams>,
}

pub fn training_plan(config: &ElectionConfig) -> TrainingPlan {
    let n = config.training.steps;
    let sig = signature_m0(sub_seed(config.seed, "signature-init"));
    let reader = reader_m0(config.candidates, sub_seed(config.seed, "reader-init"));
    let sig_data = signature_training_stream(&sig.spec, n, sub_seed(config.seed, "signature-data"));
    let reader_data =
        reader_training_stream(config.candidates, n, sub_seed(config.seed, "reader-data"));
    let hp = |eta: f64, batch: u32| Hyperparams {
        eta: FixedPoint::from_f64(eta),
        batch,
        steps: n,
    };
    TrainingPlan {
        hyperparams: vec![
            hp(config.training.signature_eta, sig_data[0].batch()),
            hp(config.training.reader_eta, reader_data[0].batch()),
        ],
        m0: vec![sig, reader],
        data: vec![sig_data, reader_data],
    }
}

/// Trains both models through the committee, audits each record through
/// the committee, and binds the results.
pub fn prepare_models(
    config: &ElectionConfig,
    world: &mut World,
) -> Result<(AuditedRegistry, Vec<ProvenanceRecord>), PipelineError> {
    let plan = training_plan(config);
    let mut deployed = Vec::new();
    let mut audits = Vec::new();
    for ((m0, data), hp) in plan.m0.iter().zip(&plan.data).zip(&plan.hyperparams) {
        let (record, model) = train_model(m0, data, hp, world)?;
        if let Some(f) = &record.failure {
            return Err(PipelineError::TrainingAborted {
                model: m0.name.clone(),
                step: f.step,
            });
        }
        audits.push(audit(record, m0, data, world)?);
        deployed.push(model);
    }
    let registry = bind_models(&deployed, &audits)?;
    Ok((
        registry,
        audits.iter().map(|a| a.record().clone()).collect(),
    ))
}

/// Registry, ground truth and mailed envelopes: everything before counting.
pub struct Mailing {
    pub registry: Registry,
    pub plan: VotePlan,
    pub envelopes: Vec<Envelope>,
}

pub fn mail_ballots(config: &ElectionConfig) -> Result<Mailing, PipelineError> {
    let registry = register_voters(config.voters, config.seed)?;
    let plan = plan_votes(&registry, config.candidates, config.counts(), config.seed);
    let blank = produce_ballots(&registry, config.seed, config.ballot_ids);
    let envelopes = cast_votes(blank, &registry, &plan, config.candidates, config.seed)?;
    Ok(Mailing {
        registry,
        plan,
        envelopes,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotRecord {
    pub ballot_id: String,
    pub read: ReadVote,
    /// The candidate the ballot counts for, after manual review.
    pub counted_for: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDigest {
    pub name: String,
    pub model_hash: Digest,
    pub record_digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitteeSummary {
    pub size: u64,
    pub honest: u64,
    pub tasks: u64,
    pub disputes: u64,
    pub voided_claims: u64,
    pub compute_gas: u64,
    pub proof_gas: u64,
    pub rounds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionReport {
    /// False when no scrutineer is honest; results then carry no guarantee.
    pub anytrust_holds: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub seed: u64,
    pub voters: u32,
    pub candidates: u32,
    pub tau: FixedPoint,
    pub tally: TallyResult,
    pub totals: Vec<u64>,
    pub signature_rejects: u64,
    pub manual_queue: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ballots: Option<Vec<BallotRecord>>,
    pub registry_digest: Digest,
    pub ledger_digest: Digest,
    pub ledger_events: u64,
    pub models: Vec<ModelDigest>,
    pub committee: CommitteeSummary,
    pub unlinkability: LinkAudit,
    /// Wall-clock time; absent in fixed-clock mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

impl ElectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self.to_json().as_bytes())
    }

    /// The recorded vote for a ballot id, if the per-ballot section exists.
    pub fn lookup(&self, ballot_id: &str) -> Option<&BallotRecord> {
        self.ballots
            .as_ref()?
            .iter()
            .find(|b| b.ballot_id == ballot_id)
    }
}

fn counted_for(p: &BallotPaper, candidates: u32) -> Option<u32> {
    match p.read_vote? {
        ReadVote::Candidate(c) => Some(c),
        ReadVote::Unidentifiable => p.manual_label.filter(|&c| c < candidates),
    }
}

fn summarize(world: &World) -> CommitteeSummary {
    let arb = world.arbiter();
    let mut s = CommitteeSummary {
        size: world.committee().len() as u64,
        honest: world.committee().honest_ids().len() as u64,
        tasks: 0,
        disputes: arb.games().count() as u64,
        voided_claims: 0,
        compute_gas: 0,
        proof_gas: 0,
        rounds: world.round(),
    };
    for t in arb.tasks() {
        s.tasks += 1;
        s.voided_claims += t.voided.len() as u64;
        s.compute_gas += t.compute_gas;
        s.proof_gas += t.proof_gas;
    }
    s
}

/// Binds the tally to the ledger and the model provenance.
pub fn publish_results(
    config: &ElectionConfig,
    tally: &TallyResult,
    papers: &[BallotPaper],
    registry: &Registry,
    models: &AuditedRegistry,
    world: &World,
) -> Result<ElectionReport, PipelineError> {
    if let Some(t) = world.arbiter().tasks().find(|t| !t.is_final()) {
        return Err(PipelineError::Unfinalized(t.spec.task_id.clone()));
    }
    let anytrust_holds = world.committee().anytrust_holds();
    let ballots = config.ballot_ids.then(|| {
        let mut b: Vec<BallotRecord> = papers
            .iter()
            .map(|p| BallotRecord {
                ballot_id: p.ballot_id.clone(),
                read: p.read_vote.expect("every paper read"),
                counted_for: counted_for(p, config.candidates),
            })
            .collect();
        b.sort_by(|x, y| x.ballot_id.cmp(&y.ballot_id));
        b
    });
    Ok(ElectionReport {
        anytrust_holds,
        warning: (!anytrust_holds).then(|| {
            "no honest scrutineer: accepted results are unverified and may be wrong".to_string()
        }),
        seed: config.seed,
        voters: config.voters,
        candidates: config.candidates,
        tau: config.tau_fixed(),
        totals: tally.totals(),
        signature_rejects: tally.rejected_signature,
        manual_queue: tally.unidentifiable,
        tally: tally.clone(),
        ballots,
        registry_digest: registry.digest(),
        ledger_digest: world.ledger_digest(),
        ledger_events: world.arbiter().ledger().len() as u64,
        models: models
            .digests()
            .into_iter()
            .map(|(name, model_hash, record_digest)| ModelDigest {
                name,
                model_hash,
                record_digest,
            })
            .collect(),
        committee: summarize(world),
        unlinkability: LinkAudit::default(),
        generated_at: None,
    })
}

/// Everything an election run retains.
pub struct ElectionRun {
    pub report: ElectionReport,
    pub registry: Registry,
    pub checks: Vec<SignatureCheck>,
    /// The ballot box in tabulation order.
    pub papers: Vec<BallotPaper>,
    pub records: Vec<ProvenanceRecord>,
    pub models: AuditedRegistry,
    /// What voters keep: their ballot id and intended vote, no voter id.
    pub receipts: BTreeMap<String, Option<u32>>,
    pub world: World,
}

impl ElectionRun {
    /// Structural audit of all retained state, report included.
    pub fn audit_links(&self) -> LinkAudit {
        let voters: BTreeSet<String> = self
            .registry
            .voters()
            .iter()
            .map(|v| v.voter_id.clone())
            .collect();
        let ballots: BTreeSet<String> = self
            .papers
            .iter()
            .map(|p| p.ballot_id.clone())
            .chain(self.receipts.keys().cloned())
            .filter(|b| !b.is_empty())
            .collect();
        let j = |v: serde_json::Result<serde_json::Value>| v.expect("retained state serializes");
        let roots = [
            ("registry", j(serde_json::to_value(&self.registry))),
            ("signature-checks", j(serde_json::to_value(&self.checks))),
            ("ballot-box", j(serde_json::to_value(&self.papers))),
            ("provenance", j(serde_json::to_value(&self.records))),
            ("models", j(serde_json::to_value(&self.models))),
            ("receipts", j(serde_json::to_value(&self.receipts))),
            ("arbiter", j(serde_json::to_value(self.world.arbiter()))),
            (
                "transcript",
                j(serde_json::to_value(self.world.transcript())),
            ),
            ("report", j(serde_json::to_value(&self.report))),
        ];
        audit_links(&roots, &voters, &ballots)
    }
}

/// Runs the whole election through `world`'s committee.
pub fn run_election(
    config: &ElectionConfig,
    mut world: World,
) -> Result<ElectionRun, PipelineError> {
    config.validate()?;
    let (models, records) = prepare_models(config, &mut world)?;
    let Mailing {
        registry,
        plan: _,
        envelopes,
    } = mail_ballots(config)?;
    let receipts = envelopes
        .iter()
        .map(|e| (e.ballot.ballot_id.clone(), e.ballot.manual_label))
        .filter(|(b, _)| !b.is_empty())
        .collect();
    let sig_program = signature_program(&models.get(SIGNATURE_MODEL).expect("bound").spec)?;
    let reader_program = reader_program(&models.get(READER_MODEL).expect("bound").spec)?;

    let ingested = envelopes.len() as u64;
    let checks = verify_signatures(
        &envelopes,
        &registry,
        &sig_program,
        &models,
        config.tau_fixed(),
        &mut world,
    )?;
    let rejected = checks
        .iter()
        .filter(|c| c.decision == SignatureDecision::Reject)
        .count() as u64;
    let papers = extract_ballots(envelopes, &checks, config.seed);
    let papers = tabulate(
        papers,
        &reader_program,
        &models,
        config.candidates,
        &mut world,
    )?;
    let result = tally(&papers, config.candidates, ingested, rejected);
    if !result.conserved() {
        return Err(PipelineError::Invariant(format!(
            "tally does not conserve ballots: {result:?}"
        )));
    }
    let report = publish_results(config, &result, &papers, &registry, &models, &world)?;
    let mut run = ElectionRun {
        report,
        registry,
        checks,
        papers,
        records,
        models,
        receipts,
        world,
    };
    let links = run.audit_links();
    if !links.is_clean() {
        return Err(PipelineError::Invariant(format!(
            "{} voter/ballot links survive extraction",
            links.paths.len()
        )));
    }
    run.report.unlinkability = links;
    Ok(run)
}

/// The same election on one machine: local training, local model runs.
pub struct OracleRun {
    pub models: Vec<Model>,
    pub checks: Vec<SignatureCheck>,
    pub papers: Vec<BallotPaper>,
    pub tally: TallyResult,
}

pub fn local_oracle(config: &ElectionConfig) -> Result<OracleRun, PipelineError> {
    config.validate()?;
    let plan = training_plan(config);
    let mut models = Vec::new();
    for ((m0, data), hp) in plan.m0.iter().zip(&plan.data).zip(&plan.hyperparams) {
        models.push(train_local(m0, data, hp)?.1);
    }
    let Mailing {
        registry,
        envelopes,
        ..
    } = mail_ballots(config)?;
    let sig_program: Arc<Program> = signature_program(&models[0].spec)?;
    let reader_program: Arc<Program> =
        reader_program(&reader_spec(config.candidates, models[1].spec.seed))?;
    let ingested = envelopes.len() as u64;
    let checks = local_signature_checks(
        &envelopes,
        &registry,
        &sig_program,
        &models[0],
        config.tau_fixed(),
    )?;
    let rejected = checks
        .iter()
        .filter(|c| c.decision == SignatureDecision::Reject)
        .count() as u64;
    let papers = extract_ballots(envelopes, &checks, config.seed);
    let papers = local_tabulate(papers, &reader_program, &models[1], config.candidates)?;
    let tally = tally(&papers, config.candidates, ingested, rejected);
    Ok(OracleRun {
        models,
        checks,
        papers,
        tally,
    })
}
