use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{Minibatch, Model, ModelError};
use super::training::{
    model_from_outputs, run_step, step_task, training_program, Hyperparams, TrainError,
};
use crate::arbiter::{ScrutineerId, Verdict};
use crate::committee::{RunError, TaskOutcome, World};
use crate::hash::Digest;
use crate::vm::{ModelSpec, TraceCommitment};

/// One link `M_{i-1} -D_i-> M_i` of the chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingStep {
    pub index: u32,
    pub minibatch_hash: Digest,
    pub pre_model_hash: Digest,
    pub post_model_hash: Digest,
    pub trace: TraceCommitment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub task_id: String,
    pub accepted_output: Option<Digest>,
    pub voided: Vec<ScrutineerId>,
    /// `(asserter, challenger, verdict)` per dispute.
    pub disputes: Vec<(ScrutineerId, ScrutineerId, Option<Verdict>)>,
}

impl From<&TaskOutcome> for Attestation {
    fn from(o: &TaskOutcome) -> Self {
        Attestation {
            task_id: o.task_id.clone(),
            accepted_output: o.accepted_output(),
            voided: o.voided.clone(),
            disputes: o
                .games
                .iter()
                .map(|g| (g.asserter, g.challenger, g.verdict))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFailure {
    pub step: u32,
    pub reason: String,
}

/// The committed chain `M_0 -D_1-> M_1 -> ... -D_n-> M_n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub model: String,
    pub spec: ModelSpec,
    pub m0_hash: Digest,
    pub hyperparams: Hyperparams,
    /// Minibatch hashes, published before the first step.
    pub data_commitment: Vec<Digest>,
    pub steps: Vec<TrainingStep>,
    pub final_hash: Digest,
    pub attestation: Vec<Attestation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StepFailure>,
}

impl ProvenanceRecord {
    pub fn digest(&self) -> Digest {
        Digest::of(
            serde_json::to_string(self)
                .expect("records serialize")
                .as_bytes(),
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProvenanceError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Exec(#[from] crate::vm::trace::ExecError),
    #[error("need at least one training step")]
    NoSteps,
    #[error("data stream has {got} minibatches, expected {expected}")]
    DataLength { got: usize, expected: usize },
    #[error("minibatch {0} has the wrong batch size")]
    BatchSize(u32),
    #[error("malformed record: {0}")]
    Malformed(String),
}

fn check_data(data: &[Minibatch], hp: &Hyperparams) -> Result<(), ProvenanceError> {
    if hp.steps == 0 {
        return Err(ProvenanceError::NoSteps);
    }
    if data.len() != hp.steps as usize {
        return Err(ProvenanceError::DataLength {
            got: data.len(),
            expected: hp.steps as usize,
        });
    }
    if let Some(i) = data.iter().position(|d| d.batch() != hp.batch) {
        return Err(ProvenanceError::BatchSize(i as u32 + 1));
    }
    Ok(())
}

/// Trains `m0` on `data`, each step verified by the committee in `world`.
/// Returns the record and the committee-accepted final model. A step that
/// ends without an accepted result aborts training with a failure mark.
pub fn train_model(
    m0: &Model,
    data: &[Minibatch],
    hp: &Hyperparams,
    world: &mut World,
) -> Result<(ProvenanceRecord, Model), ProvenanceError> {
    check_data(data, hp)?;
    let program = training_program(&m0.spec, hp.batch, hp.eta)?;
    let mut record = ProvenanceRecord {
        model: m0.name.clone(),
        spec: m0.spec.clone(),
        m0_hash: m0.hash(),
        hyperparams: *hp,
        data_commitment: data.iter().map(Minibatch::hash).collect(),
        steps: Vec::new(),
        final_hash: m0.hash(),
        attestation: Vec::new(),
        failure: None,
    };
    let mut model = m0.clone();
    for (i, d) in data.iter().enumerate() {
        let index = i as u32 + 1;
        let task = step_task(
            &format!("train/{}/step-{index}", m0.name),
            program.clone(),
            &model,
            d,
        );
        let spec = task.spec()?;
        let outcome = world.run_task(&task)?;
        record.attestation.push(Attestation::from(&outcome));
        let (Some(c), Some(outputs)) = (outcome.accepted, outcome.outputs.as_ref()) else {
            record.failure = Some(StepFailure {
                step: index,
                reason: outcome
                    .failure
                    .clone()
                    .unwrap_or_else(|| "no accepted result".into()),
            });
            return Ok((record, model));
        };
        let next = model_from_outputs(&model, outputs)?;
        record.steps.push(TrainingStep {
            index,
            minibatch_hash: d.hash(),
            pre_model_hash: model.hash(),
            post_model_hash: next.hash(),
            trace: TraceCommitment {
                program_hash: spec.program_hash,
                input_hash: spec.input_hash,
                step_count: c.step_count,
                root: c.trace_root,
                output_hash: c.output_hash,
            },
        });
        model = next;
    }
    record.final_hash = model.hash();
    Ok((record, model))
}

/// Local, committee-free training: the plain fold of `train_step`.
pub fn train_local(
    m0: &Model,
    data: &[Minibatch],
    hp: &Hyperparams,
) -> Result<(Vec<TraceCommitment>, Model), ProvenanceError> {
    check_data(data, hp)?;
    let program = training_program(&m0.spec, hp.batch, hp.eta)?;
    let mut model = m0.clone();
    let mut traces = Vec::new();
    for d in data {
        let r = run_step(&program, &model, d)?;
        traces.push(r.trace);
        model = r.model;
    }
    Ok((traces, model))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    /// Hashes in the record do not link up, or disagree with the data.
    ChainMismatch,
    /// The committee's recomputation disagrees with the recorded step.
    TraceMismatch,
    /// The record itself marks the step as failed.
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Verification {
    Valid,
    Invalid { step: u32, reason: InvalidReason },
}

impl Verification {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verification::Valid)
    }
}

/// Checks chain continuity and recomputes every step through the committee,
/// reporting the first step that fails either check.
pub fn verify_provenance(
    record: &ProvenanceRecord,
    m0: &Model,
    data: &[Minibatch],
    world: &mut World,
) -> Result<Verification, ProvenanceError> {
    let hp = &record.hyperparams;
    check_data(data, hp)?;
    let n = hp.steps as usize;
    if record.data_commitment.len() != n || m0.spec != record.spec {
        return Err(ProvenanceError::Malformed(
            "commitment length or spec differs".into(),
        ));
    }
    if let Some(f) = &record.failure {
        return Ok(Verification::Invalid {
            step: f.step,
            reason: InvalidReason::Aborted,
        });
    }
    if record.steps.len() != n
        || record
            .steps
            .iter()
            .enumerate()
            .any(|(i, s)| s.index as usize != i + 1)
    {
        return Err(ProvenanceError::Malformed(
            "steps are not numbered 1..n".into(),
        ));
    }
    let invalid = |step: u32, reason| Ok(Verification::Invalid { step, reason });
    let program = training_program(&m0.spec, hp.batch, hp.eta)?;
    let tag = world.round();
    let mut model = m0.clone();
    let mut prev_post = record.m0_hash;
    for (i, s) in record.steps.iter().enumerate() {
        let chain_ok = s.pre_model_hash == prev_post
            && (i > 0 || s.pre_model_hash == m0.hash())
            && s.minibatch_hash == record.data_commitment[i]
            && s.minibatch_hash == data[i].hash()
            && (i + 1 < n || s.post_model_hash == record.final_hash);
        if !chain_ok {
            return invalid(s.index, InvalidReason::ChainMismatch);
        }
        prev_post = s.post_model_hash;

        let task = step_task(
            &format!("verify/{}/r{tag}/step-{}", record.model, s.index),
            program.clone(),
            &model,
            &data[i],
        );
        let outcome = world.run_task(&task)?;
        let (Some(c), Some(outputs)) = (outcome.accepted, outcome.outputs.as_ref()) else {
            return invalid(s.index, InvalidReason::TraceMismatch);
        };
        let next = model_from_outputs(&model, outputs)?;
        let same = c.trace_root == s.trace.root
            && c.output_hash == s.trace.output_hash
            && c.step_count == s.trace.step_count
            && next.hash() == s.post_model_hash;
        if !same {
            return invalid(s.index, InvalidReason::TraceMismatch);
        }
        model = next;
    }
    Ok(Verification::Valid)
}

/// A record together with the outcome of verifying it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Audit {
    record: ProvenanceRecord,
    verdict: Verification,
}

impl Audit {
    pub fn record(&self) -> &ProvenanceRecord {
        &self.record
    }

    pub fn verdict(&self) -> Verification {
        self.verdict
    }
}

/// Runs [`verify_provenance`] and keeps the result for [`bind_models`].
pub fn audit(
    record: ProvenanceRecord,
    m0: &Model,
    data: &[Minibatch],
    world: &mut World,
) -> Result<Audit, ProvenanceError> {
    let verdict = verify_provenance(&record, m0, data, world)?;
    Ok(Audit { record, verdict })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BindError {
    #[error("no provenance record for model `{0}`")]
    MissingRecord(String),
    #[error("provenance record for `{model}` is invalid at step {step} ({reason:?})")]
    InvalidRecord {
        model: String,
        step: u32,
        reason: InvalidReason,
    },
    #[error("deployed weights of `{0}` do not match the audited final model")]
    HashMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditedModel {
    pub model: Model,
    pub model_hash: Digest,
    pub record_digest: Digest,
}

/// Models whose weights are the final model of a verified record. Only
/// [`bind_models`] can build one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditedRegistry {
    models: BTreeMap<String, AuditedModel>,
}

impl AuditedRegistry {
    pub fn get(&self, name: &str) -> Option<&Model> {
        self.models.get(name).map(|m| &m.model)
    }

    pub fn entry(&self, name: &str) -> Option<&AuditedModel> {
        self.models.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    /// `(model name, model hash, record digest)` for reports.
    pub fn digests(&self) -> Vec<(String, Digest, Digest)> {
        self.models
            .iter()
            .map(|(k, m)| (k.clone(), m.model_hash, m.record_digest))
            .collect()
    }
}

/// Admits each deployed model only with a valid record ending at its hash.
pub fn bind_models(deployed: &[Model], audits: &[Audit]) -> Result<AuditedRegistry, BindError> {
    let mut models = BTreeMap::new();
    for m in deployed {
        let a = audits
            .iter()
            .find(|a| a.record.model == m.name)
            .ok_or_else(|| BindError::MissingRecord(m.name.clone()))?;
        if let Verification::Invalid { step, reason } = a.verdict {
            return Err(BindError::InvalidRecord {
                model: m.name.clone(),
                step,
                reason,
            });
        }
        if a.record.final_hash != m.hash() {
            return Err(BindError::HashMismatch(m.name.clone()));
        }
        models.insert(
            m.name.clone(),
            AuditedModel {
                model: m.clone(),
                model_hash: m.hash(),
                record_digest: a.record.digest(),
            },
        );
    }
    Ok(AuditedRegistry { models })
}
