//! Training provenance: models trained as a committed chain of SGD steps,
//! each step verified by the committee, with tamper localization.

pub mod fixtures;
mod model;
mod record;
mod training;

pub use model::{synthetic_stream, Minibatch, Model, ModelError};
pub use record::{
    audit, bind_models, train_local, train_model, verify_provenance, Attestation, Audit,
    AuditedModel, AuditedRegistry, BindError, InvalidReason, ProvenanceError, ProvenanceRecord,
    StepFailure, TrainingStep, Verification,
};
pub use training::{
    grad_name, model_from_outputs, step_inputs, step_task, train_step, training_graph,
    training_program, Hyperparams, StepResult, TrainError,
};
