use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{Minibatch, Model, ModelError};
use crate::committee::TaskInput;
use crate::vm::fixed::ONE_RAW;
use crate::vm::trace::{ExecError, NamedTensors};
use crate::vm::{
    linearize, Axis, CompGraph, FixedPoint, GraphBuilder, GraphError, ModelSpec, Op, Program,
    TraceCommitment, ValueRef,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Learning rate.
    pub eta: FixedPoint,
    pub batch: u32,
    /// Number of steps `n`.
    pub steps: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("learning rate must not be negative")]
    NegativeEta,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("layer `{0}` cannot be trained")]
    Untrainable(String),
    #[error("fixed-point overflow during training step")]
    Overflow { trace: TraceCommitment },
}

/// Name of the gradient output for parameter `p`.
pub fn grad_name(p: &str) -> String {
    format!("grad.{p}")
}

/// The spec without trailing argmax layers; loss and gradients are defined on
/// the last dense layer's output.
fn trainable(spec: &ModelSpec) -> Result<ModelSpec, TrainError> {
    let mut s = spec.clone();
    while s.layers.last().is_some_and(|l| l.kind == "argmax") {
        s.layers.pop();
    }
    if let Some(l) = s
        .layers
        .iter()
        .find(|l| l.kind != "dense" && l.kind != "relu")
    {
        return Err(TrainError::Untrainable(l.kind.clone()));
    }
    if s.layers.last().is_some_and(|l| l.kind != "dense") {
        return Err(TrainError::Untrainable("trailing activation".into()));
    }
    Ok(s)
}

/// `1/k` in Q16.16, truncated.
fn reciprocal(k: u32) -> FixedPoint {
    FixedPoint::from_raw(ONE_RAW / k as i64)
}

/// One SGD step on `L = 1/(2b) Σ (y - t)²` as an explicit graph: forward
/// pass, closed-form backward pass, update `W' = W - η·∇L`. Outputs are the
/// updated parameters (same names as the inputs), `grad.<p>` for each
/// parameter, and `loss`.
pub fn training_graph(
    spec: &ModelSpec,
    batch: u32,
    eta: FixedPoint,
) -> Result<CompGraph, TrainError> {
    if batch == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if eta.raw() < 0 {
        return Err(TrainError::NegativeEta);
    }
    let spec = trainable(spec)?;
    spec.validate()?;
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[batch, spec.input_width().unwrap()])?;
    let t = b.input("t", &[batch, spec.output_width().unwrap()])?;
    let params = spec.parameter_shapes();
    for (name, shape) in &params {
        b.input(name, shape)?;
    }
    let fw = spec.append_forward(&mut b, "", "fwd.", x)?;
    let inv_b = reciprocal(batch);

    let e = b.node("err", Op::Sub, &[fw.output, t])?;
    let sq = b.node("loss.sq", Op::Mul, &[e, e])?;
    let rows = b.node("loss.rows", Op::SumReduce { axis: Axis::Last }, &[sq])?;
    let total = b.node("loss.sum", Op::SumReduce { axis: Axis::Last }, &[rows])?;
    let loss = b.node(
        "loss",
        Op::ScalarMul {
            factor: reciprocal(2 * batch),
        },
        &[total],
    )?;

    // Whether a relu follows dense layer i.
    let mut relu_after = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if l.kind == "dense" {
            relu_after.push(spec.layers.get(i + 1).is_some_and(|n| n.kind == "relu"));
        }
    }
    let layers = fw.layer_inputs.len();
    let mut grads: Vec<(ValueRef, ValueRef)> = vec![(e, e); layers];
    let mut delta = e;
    for i in (0..layers).rev() {
        let tn = Op::Matmul {
            transpose_a: true,
            transpose_b: false,
        };
        let gw = b.node(&format!("bwd.w{i}.raw"), tn, &[fw.layer_inputs[i], delta])?;
        let gb = b.node(
            &format!("bwd.b{i}.raw"),
            Op::SumReduce { axis: Axis::First },
            &[delta],
        )?;
        grads[i] = (gw, gb);
        if i > 0 {
            let w = b.lookup(&format!("w{i}")).expect("declared above");
            let nt = Op::Matmul {
                transpose_a: false,
                transpose_b: true,
            };
            let back = b.node(&format!("bwd.a{i}"), nt, &[delta, w])?;
            delta = if relu_after[i - 1] {
                b.node(
                    &format!("bwd.z{}", i - 1),
                    Op::ReluGrad,
                    &[back, fw.pre_activations[i - 1]],
                )?
            } else {
                back
            };
        }
    }

    let mut updated = Vec::new();
    let mut grad_outs = Vec::new();
    for (i, &(gw, gb)) in grads.iter().enumerate().take(layers) {
        for (p, raw) in [(format!("w{i}"), gw), (format!("b{i}"), gb)] {
            let g = b.node(&grad_name(&p), Op::ScalarMul { factor: inv_b }, &[raw])?;
            let step = b.node(
                &format!("upd.{p}.step"),
                Op::ScalarMul { factor: eta },
                &[g],
            )?;
            let cur = b.lookup(&p).expect("declared above");
            let new = b.node(&format!("upd.{p}"), Op::Sub, &[cur, step])?;
            updated.push((p.clone(), new));
            grad_outs.push((grad_name(&p), g));
        }
    }
    // Canonical parameter order for outputs.
    for (name, _) in &params {
        let v = updated
            .iter()
            .find(|(p, _)| p == name)
            .expect("every parameter updated")
            .1;
        b.output(name, v)?;
    }
    for (name, _) in &params {
        let g = grad_name(name);
        let v = grad_outs
            .iter()
            .find(|(p, _)| *p == g)
            .expect("every parameter has a gradient")
            .1;
        b.output(&g, v)?;
    }
    b.output("loss", loss)?;
    Ok(b.build()?)
}

pub fn training_program(
    spec: &ModelSpec,
    batch: u32,
    eta: FixedPoint,
) -> Result<Arc<Program>, TrainError> {
    Ok(Arc::new(linearize(&training_graph(spec, batch, eta)?)?))
}

pub fn step_inputs(model: &Model, data: &Minibatch) -> NamedTensors {
    let mut inputs = model.params.clone();
    inputs.insert("x".into(), data.x.clone());
    inputs.insert("t".into(), data.t.clone());
    inputs
}

pub fn step_task(
    task_id: &str,
    program: Arc<Program>,
    model: &Model,
    data: &Minibatch,
) -> TaskInput {
    TaskInput::new(task_id, program, step_inputs(model, data))
}

/// Extracts the updated model from a training step's outputs.
pub fn model_from_outputs(prev: &Model, outputs: &NamedTensors) -> Result<Model, ModelError> {
    Model::new(prev.name.clone(), prev.spec.clone(), outputs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepResult {
    pub model: Model,
    pub gradients: NamedTensors,
    pub loss: FixedPoint,
    pub trace: TraceCommitment,
}

/// Runs one training step locally: `f(M_{i-1}, D_i)`.
pub fn train_step(
    model: &Model,
    data: &Minibatch,
    eta: FixedPoint,
) -> Result<StepResult, TrainError> {
    let program = training_program(&model.spec, data.batch(), eta)?;
    run_step(&program, model, data)
}

pub(crate) fn run_step(
    program: &Program,
    model: &Model,
    data: &Minibatch,
) -> Result<StepResult, TrainError> {
    let exec = program.execute(&step_inputs(model, data))?;
    if exec.overflow || exec.faulted {
        return Err(TrainError::Overflow {
            trace: exec.trace.commitment,
        });
    }
    let next = model_from_outputs(model, &exec.outputs)?;
    let gradients = exec
        .outputs
        .iter()
        .filter(|(k, _)| k.starts_with("grad."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(StepResult {
        model: next,
        gradients,
        loss: exec.outputs["loss"].data()[0],
        trace: exec.trace.commitment,
    })
}
