use std::sync::Arc;

use crate::arbiter::{Claim, ClaimEvidence, OneStepOpening, ScrutineerId, StateClaim};
use crate::vm::fixed::{FixedPoint, RAW_MAX};
use crate::vm::trace::{collect_outputs, ExecError, NamedTensors, Trace};
use crate::vm::{MicroKind, MicroOp, Program, VmState};

/// How a local trace departs from the honest execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fabrication {
    Honest,
    /// State `k` is perturbed, then execution continues honestly.
    CorruptAt(u64),
    /// The final state's first output element is perturbed.
    WrongOutput,
}

/// A scrutineer's local execution of a task, honest or fabricated, and
/// everything needed to argue for it in front of the arbiter.
#[derive(Debug)]
pub struct Prover {
    program: Arc<Program>,
    inputs: Arc<NamedTensors>,
    fabrication: Fabrication,
    trace: Trace,
    final_state: VmState,
}

/// Element index written first by `op` in its output slot.
fn first_written(op: &MicroOp, program: &Program) -> usize {
    match &op.kind {
        MicroKind::Dot { row, col_start, .. } => {
            let shape = &program.layout().slot_shapes[op.out as usize];
            let cols = shape.last().copied().unwrap_or(1);
            (*row * cols + *col_start) as usize
        }
        MicroKind::Map { start, .. } => *start as usize,
        MicroKind::Reduce { lane, .. } => *lane as usize,
        MicroKind::Argmax { row, .. } => *row as usize,
    }
}

fn nudge(v: FixedPoint) -> FixedPoint {
    if v.raw() > RAW_MAX - FixedPoint::ONE.raw() {
        FixedPoint::from_raw(v.raw() - FixedPoint::ONE.raw())
    } else {
        FixedPoint::from_raw(v.raw() + FixedPoint::ONE.raw())
    }
}

fn perturb(state: &mut VmState, slot: u32, idx: usize) {
    let target = state
        .slot(slot)
        .and_then(|t| t.data().get(idx).copied())
        .map(|v| (slot, idx, v));
    // Fall back to the first populated slot if the target is empty.
    let target = target.or_else(|| {
        (0..state.slot_count() as u32).find_map(|s| {
            state
                .slot(s)
                .and_then(|t| t.data().first().map(|&v| (s, 0, v)))
        })
    });
    if let Some((s, i, v)) = target {
        state.overwrite_element(s, i, nudge(v));
    }
}

impl Fabrication {
    /// The fabrication actually applied to a program of `step_count` steps;
    /// corruption past the end of the trace is no corruption.
    pub fn effective(self, step_count: u64) -> Self {
        match self {
            Fabrication::CorruptAt(k) if k > step_count => Fabrication::Honest,
            f => f,
        }
    }

    fn hook<'a>(self, program: &'a Program) -> impl FnMut(u64, &mut VmState) + 'a {
        let t = program.step_count();
        move |i, state| match self {
            Fabrication::Honest => {}
            Fabrication::CorruptAt(k) if i == k => {
                if k == 0 {
                    perturb(
                        state,
                        program.layout().input_slots.first().copied().unwrap_or(0),
                        0,
                    );
                } else {
                    let op = &program.ops()[k as usize - 1];
                    perturb(state, op.out, first_written(op, program));
                }
            }
            Fabrication::WrongOutput if i == t => {
                perturb(
                    state,
                    program.layout().output_slots.first().copied().unwrap_or(0),
                    0,
                );
            }
            _ => {}
        }
    }
}

impl Prover {
    pub fn new(
        program: Arc<Program>,
        inputs: Arc<NamedTensors>,
        fabrication: Fabrication,
    ) -> Result<Self, ExecError> {
        let fabrication = fabrication.effective(program.step_count());
        let (exec, final_state) = program.run_with(&inputs, fabrication.hook(&program))?;
        Ok(Prover {
            trace: exec.trace,
            final_state,
            program,
            inputs,
            fabrication,
        })
    }

    pub fn honest(program: Arc<Program>, inputs: Arc<NamedTensors>) -> Result<Self, ExecError> {
        Self::new(program, inputs, Fabrication::Honest)
    }

    pub fn fabrication(&self) -> Fabrication {
        self.fabrication
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn outputs(&self) -> NamedTensors {
        collect_outputs(self.program.layout(), &self.final_state)
    }

    pub fn final_state(&self) -> &VmState {
        &self.final_state
    }

    /// State `i` of this (possibly fabricated) execution, replayed.
    pub fn state(&self, i: u64) -> VmState {
        if i == self.program.step_count() {
            return self.final_state.clone();
        }
        self.program
            .state_at_with(&self.inputs, i, self.fabrication.hook(&self.program))
            .expect("inputs were validated at construction")
    }

    pub fn claim(&self, task_id: &str, claimant: ScrutineerId) -> Claim {
        let c = &self.trace.commitment;
        let t = c.step_count;
        let layout = self.program.layout();
        Claim {
            task_id: task_id.to_string(),
            claimant,
            program_hash: c.program_hash,
            input_hash: c.input_hash,
            output_hash: c.output_hash,
            trace_root: c.root,
            step_count: t,
            submission_round: 0,
            evidence: ClaimEvidence {
                initial_proof: self.trace.proof(0).expect("index 0 exists"),
                final_state_hash: self.trace.state_hash(t).expect("index T exists"),
                final_proof: self.trace.proof(t).expect("index T exists"),
                output_opening: self.final_state.open(&layout.output_slots),
            },
        }
    }

    pub fn state_claim(&self, i: u64) -> StateClaim {
        StateClaim {
            index: i,
            hash: self.trace.state_hash(i).expect("index within trace"),
            proof: self.trace.proof(i).expect("index within trace"),
        }
    }

    /// Opening of state `lo` and op `lo` for one-step verification.
    pub fn one_step(&self, lo: u64) -> OneStepOpening {
        let op = self.program.ops()[lo as usize].clone();
        let pre = self.state(lo);
        OneStepOpening {
            pre_state: pre.open(&op.touched_slots()),
            op_proof: self
                .program
                .op_proof(lo as usize)
                .expect("op index within program"),
            op,
        }
    }
}
