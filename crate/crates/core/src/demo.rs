//! Small fixed tasks for dispute drills and tests.

use std::sync::Arc;

use crate::committee::TaskInput;
use crate::vm::trace::NamedTensors;
use crate::vm::{linearize, FixedPoint, FixedTensor, GraphBuilder, Op, Program};

fn scalar_input(v: FixedPoint) -> FixedTensor {
    FixedTensor::new(vec![1], vec![v]).expect("one element")
}

/// `a + b` as a one-step program.
pub fn add_program() -> Arc<Program> {
    let mut b = GraphBuilder::new();
    let x = b.input("a", &[1]).expect("fresh name");
    let y = b.input("b", &[1]).expect("fresh name");
    let s = b.node("sum", Op::Add, &[x, y]).expect("shapes match");
    b.output("sum", s).expect("fresh name");
    Arc::new(linearize(&b.build().expect("valid graph")).expect("linearizes"))
}

pub fn add_task(task_id: &str, a: FixedPoint, b: FixedPoint) -> TaskInput {
    let inputs: NamedTensors = [
        ("a".to_string(), scalar_input(a)),
        ("b".to_string(), scalar_input(b)),
    ]
    .into();
    TaskInput::new(task_id, add_program(), inputs)
}

/// A program of exactly `steps` micro-ops: `y_i = y_{i-1} + x` from `y_0 = x`.
pub fn chain_program(steps: u32) -> Arc<Program> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[1]).expect("fresh name");
    let mut y = x;
    for i in 0..steps {
        y = b
            .node(&format!("y{i}"), Op::Add, &[y, x])
            .expect("shapes match");
    }
    b.output("y", y).expect("fresh name");
    let p = linearize(&b.build().expect("valid graph")).expect("linearizes");
    debug_assert_eq!(p.step_count(), steps as u64);
    Arc::new(p)
}

/// Chain task with `x = seed mod 16 / 16`, which stays far from saturation
/// for any practical length.
pub fn chain_task(task_id: &str, steps: u32, seed: u64) -> TaskInput {
    let x = FixedPoint::dyadic((seed % 16) as i64 + 1, 4);
    let inputs: NamedTensors = [("x".to_string(), scalar_input(x))].into();
    TaskInput::new(task_id, chain_program(steps), inputs)
}

/// One signature comparison with the seeded initial embedding: voter 0's
/// reference against a genuine-looking scan.
pub fn signature_task(task_id: &str, seed: u64) -> TaskInput {
    use crate::pipeline::models::{signature_inputs, signature_m0, signature_program};
    let model = signature_m0(seed);
    let registry = crate::pipeline::register_voters(1, seed).expect("one voter");
    let reference = &registry.voters()[0].reference_signature;
    let scan = FixedTensor::new(
        reference.shape().to_vec(),
        reference
            .data()
            .iter()
            .map(|v| FixedPoint::from_raw(v.raw() + 512))
            .collect(),
    )
    .expect("same shape");
    let program = signature_program(&model.spec).expect("valid spec");
    TaskInput::new(task_id, program, signature_inputs(&model, reference, &scan))
}
