//! Training fixtures: the 2→1 linear model and the 16→32→8 signature
//! embedding, plus a forger for tamper drills.

use super::model::{synthetic_stream, Minibatch, Model};
use super::record::{ProvenanceError, ProvenanceRecord};
use super::training::{run_step, training_program, Hyperparams};
use crate::vm::trace::NamedTensors;
use crate::vm::{FixedPoint, FixedTensor, ModelSpec};

pub const LINEAR_SEED: u64 = 21;
pub const SIGNATURE_SEED: u64 = 7;
pub const SIGNATURE_DATA_SEED: u64 = 8;

/// `y = x·w + b` with `w = [0.5, -0.25]ᵀ`, `b = 0.125`.
pub fn linear_model() -> Model {
    let mut p = NamedTensors::new();
    p.insert(
        "w0".into(),
        FixedTensor::from_f64(&[2, 1], &[0.5, -0.25]).expect("shape"),
    );
    p.insert(
        "b0".into(),
        FixedTensor::from_f64(&[1], &[0.125]).expect("shape"),
    );
    Model::new("linear", ModelSpec::mlp(&[2, 1], 0), &p).expect("valid fixture")
}

/// η = 0.125, batch 2, `n` steps.
pub fn linear_hyperparams(n: u32) -> Hyperparams {
    Hyperparams {
        eta: FixedPoint::dyadic(1, 3),
        batch: 2,
        steps: n,
    }
}

/// Minibatches on the `1/8` grid with targets from `t = 0.75·x₀ - 0.5·x₁ + 0.25`.
pub fn linear_stream(n: u32) -> Vec<Minibatch> {
    let xs = synthetic_stream(&ModelSpec::mlp(&[2, 1], 0), n, 2, LINEAR_SEED);
    xs.into_iter()
        .map(|d| {
            let t: Vec<f64> =
                d.x.data()
                    .chunks(2)
                    .map(|r| 0.75 * r[0].to_f64() - 0.5 * r[1].to_f64() + 0.25)
                    .collect();
            Minibatch {
                t: FixedTensor::from_f64(&[2, 1], &t).expect("shape"),
                x: d.x,
            }
        })
        .collect()
}

pub fn signature_spec() -> ModelSpec {
    ModelSpec::mlp(&[16, 32, 8], SIGNATURE_SEED)
}

/// Dyadic-initialized signature embedding.
pub fn signature_m0() -> Model {
    Model::dyadic("signature", signature_spec()).expect("valid fixture")
}

/// η = 1/64, batch 4, `n` steps.
pub fn signature_hyperparams(n: u32) -> Hyperparams {
    Hyperparams {
        eta: FixedPoint::dyadic(1, 6),
        batch: 4,
        steps: n,
    }
}

pub fn signature_stream(n: u32) -> Vec<Minibatch> {
    synthetic_stream(&signature_spec(), n, 4, SIGNATURE_DATA_SEED)
}

/// A forged record that is internally consistent but wrong from step `j` on:
/// the post-model of step `j` is nudged by one ulp, and every later step is
/// honestly recomputed from the forged model with hashes relinked.
pub fn forge_from_step(
    record: &ProvenanceRecord,
    m0: &Model,
    data: &[Minibatch],
    j: u32,
) -> Result<ProvenanceRecord, ProvenanceError> {
    let n = record.steps.len() as u32;
    if j == 0 || j > n || data.len() != n as usize {
        return Err(ProvenanceError::Malformed(format!(
            "cannot forge step {j} of {n}"
        )));
    }
    let hp = &record.hyperparams;
    let program = training_program(&m0.spec, hp.batch, hp.eta)?;
    let mut forged = record.clone();
    let mut model = m0.clone();
    for (i, d) in data.iter().enumerate() {
        let index = i as u32 + 1;
        let r = run_step(&program, &model, d)?;
        let mut next = r.model;
        if index == j {
            let first = m0.spec.parameter_shapes()[0].0.clone();
            let t = next.params.get_mut(&first).expect("declared parameter");
            let v = &mut t.data_mut()[0];
            *v = FixedPoint::from_raw(v.raw() + 1);
        }
        if index >= j {
            let s = &mut forged.steps[i];
            s.pre_model_hash = model.hash();
            s.post_model_hash = next.hash();
            s.trace = r.trace;
        }
        model = next;
    }
    forged.final_hash = model.hash();
    Ok(forged)
}
