//! Whole-program execution and trace commitments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{CompGraph, GraphError};
use super::program::{linearize, Layout, Program};
use super::state::{slot_leaf, VmState};
use super::tensor::FixedTensor;
use crate::hash::{Digest, MerkleProof, MerkleTree};

pub type NamedTensors = BTreeMap<String, FixedTensor>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("input `{name}` has shape {actual:?}, expected {expected:?}")]
    InputShape {
        name: String,
        expected: Vec<u32>,
        actual: Vec<u32>,
    },
    #[error("step index {index} out of range 0..={max}")]
    IndexOutOfRange { index: u64, max: u64 },
}

/// The public commitment to one execution.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceCommitment {
    pub program_hash: Digest,
    pub input_hash: Digest,
    pub step_count: u64,
    pub root: Digest,
    pub output_hash: Digest,
}

/// All T+1 state hashes of an execution plus their Merkle tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub commitment: TraceCommitment,
    tree: MerkleTree,
}

impl Trace {
    pub fn from_state_hashes(
        program_hash: Digest,
        input_hash: Digest,
        output_hash: Digest,
        hashes: &[Digest],
    ) -> Self {
        let tree = MerkleTree::new(hashes);
        Trace {
            commitment: TraceCommitment {
                program_hash,
                input_hash,
                step_count: hashes.len() as u64 - 1,
                root: tree.root(),
                output_hash,
            },
            tree,
        }
    }

    pub fn root(&self) -> Digest {
        self.tree.root()
    }

    pub fn step_count(&self) -> u64 {
        self.commitment.step_count
    }

    pub fn state_hash(&self, i: u64) -> Option<Digest> {
        self.tree.leaf(i as usize)
    }

    pub fn height(&self) -> u32 {
        self.tree.height()
    }

    pub fn proof(&self, i: u64) -> Result<MerkleProof, ExecError> {
        self.tree
            .proof(i as usize)
            .ok_or(ExecError::IndexOutOfRange {
                index: i,
                max: self.step_count(),
            })
    }
}

/// Membership proof that state `i` is committed in `trace`.
pub fn merkle_proof(trace: &Trace, i: u64) -> Result<MerkleProof, ExecError> {
    trace.proof(i)
}

/// Hash of an ordered list of tensors (digest of their concatenated digests).
pub fn tensors_hash<'a>(tensors: impl IntoIterator<Item = &'a FixedTensor>) -> Digest {
    let leaves: Vec<Digest> = tensors.into_iter().map(FixedTensor::digest).collect();
    Digest::of_parts(leaves.iter().map(|d| d.0.as_slice()))
}

/// Output hash computed from output slot leaves.
pub fn output_hash_from_leaves(leaves: &[Digest]) -> Digest {
    Digest::of_parts(leaves.iter().map(|d| d.0.as_slice()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub outputs: NamedTensors,
    pub trace: Trace,
    pub overflow: bool,
    pub faulted: bool,
    pub final_state_hash: Digest,
}

impl Program {
    fn ordered_inputs<'a>(
        &self,
        inputs: &'a NamedTensors,
    ) -> Result<Vec<&'a FixedTensor>, ExecError> {
        let layout = self.layout();
        layout
            .input_names
            .iter()
            .zip(&layout.input_slots)
            .map(|(name, &slot)| {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| ExecError::MissingInput(name.clone()))?;
                let expected = &layout.slot_shapes[slot as usize];
                if t.shape() != expected.as_slice() {
                    return Err(ExecError::InputShape {
                        name: name.clone(),
                        expected: expected.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                Ok(t)
            })
            .collect()
    }

    pub fn input_hash(&self, inputs: &NamedTensors) -> Result<Digest, ExecError> {
        Ok(tensors_hash(self.ordered_inputs(inputs)?))
    }

    pub fn initial_state(&self, inputs: &NamedTensors) -> Result<VmState, ExecError> {
        let ordered = self.ordered_inputs(inputs)?;
        let slots = self
            .layout()
            .input_slots
            .iter()
            .copied()
            .zip(ordered.into_iter().cloned());
        Ok(VmState::new(self.layout().slot_count() as usize, slots))
    }

    /// Runs the program, hashing every intermediate state.
    pub fn execute(&self, inputs: &NamedTensors) -> Result<Execution, ExecError> {
        self.execute_with(inputs, |_, _| {})
    }

    /// Like [`Program::execute`], with `hook(i, &mut state)` called on every
    /// state `i` before it is hashed.
    pub fn execute_with(
        &self,
        inputs: &NamedTensors,
        hook: impl FnMut(u64, &mut VmState),
    ) -> Result<Execution, ExecError> {
        self.run_with(inputs, hook).map(|(e, _)| e)
    }

    /// [`Program::execute_with`] that also hands back the final state.
    pub fn run_with(
        &self,
        inputs: &NamedTensors,
        mut hook: impl FnMut(u64, &mut VmState),
    ) -> Result<(Execution, VmState), ExecError> {
        let input_hash = self.input_hash(inputs)?;
        let mut state = self.initial_state(inputs)?;
        hook(0, &mut state);
        let mut hashes = Vec::with_capacity(self.ops().len() + 1);
        hashes.push(state.state_hash());
        for (i, op) in self.ops().iter().enumerate() {
            state.apply(op);
            hook(i as u64 + 1, &mut state);
            hashes.push(state.state_hash());
        }
        let outputs = collect_outputs(self.layout(), &state);
        let output_hash = output_hash_of(self.layout(), &state);
        let exec = Execution {
            outputs,
            trace: Trace::from_state_hashes(self.hash(), input_hash, output_hash, &hashes),
            overflow: state.overflow(),
            faulted: state.is_faulted(),
            final_state_hash: state.state_hash(),
        };
        Ok((exec, state))
    }

    /// The `i`-th state, replayed from the initial state.
    pub fn state_at(&self, inputs: &NamedTensors, i: u64) -> Result<VmState, ExecError> {
        self.state_at_with(inputs, i, |_, _| {})
    }

    pub fn state_at_with(
        &self,
        inputs: &NamedTensors,
        i: u64,
        mut hook: impl FnMut(u64, &mut VmState),
    ) -> Result<VmState, ExecError> {
        if i > self.step_count() {
            return Err(ExecError::IndexOutOfRange {
                index: i,
                max: self.step_count(),
            });
        }
        let mut state = self.initial_state(inputs)?;
        hook(0, &mut state);
        for (j, op) in self.ops()[..i as usize].iter().enumerate() {
            state.apply(op);
            hook(j as u64 + 1, &mut state);
        }
        Ok(state)
    }
}

pub fn collect_outputs(layout: &Layout, state: &VmState) -> NamedTensors {
    layout
        .output_names
        .iter()
        .zip(&layout.output_slots)
        .filter_map(|(n, &s)| state.slot(s).map(|t| (n.clone(), t.clone())))
        .collect()
}

pub fn output_hash_of(layout: &Layout, state: &VmState) -> Digest {
    let leaves: Vec<Digest> = layout
        .output_slots
        .iter()
        .map(|&s| slot_leaf(state.slot(s)))
        .collect();
    output_hash_from_leaves(&leaves)
}

/// Linearizes and runs `graph`.
pub fn execute(
    graph: &CompGraph,
    inputs: &NamedTensors,
) -> Result<(NamedTensors, Trace), ExecError> {
    let exec = linearize(graph)?.execute(inputs)?;
    Ok((exec.outputs, exec.trace))
}

pub fn state_at(graph: &CompGraph, inputs: &NamedTensors, i: u64) -> Result<VmState, ExecError> {
    linearize(graph)?.state_at(inputs, i)
}

/// On-disk trace fixture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFixture {
    pub program_hash: Digest,
    pub input_hash: Digest,
    pub step_count: u64,
    pub root: Digest,
    pub output_hash: Digest,
}

impl From<&TraceCommitment> for TraceFixture {
    fn from(c: &TraceCommitment) -> Self {
        TraceFixture {
            program_hash: c.program_hash,
            input_hash: c.input_hash,
            step_count: c.step_count,
            root: c.root,
            output_hash: c.output_hash,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::fixed::FixedPoint;
    use crate::vm::graph::{GraphBuilder, ModelSpec, Op};
    use crate::vm::state::step;

    fn named(pairs: &[(&str, FixedTensor)]) -> NamedTensors {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn identity_graph() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, 3]).unwrap();
        let z = b.input("z", &[3]).unwrap();
        let y = b.node("y", Op::AddBias, &[x, z]).unwrap();
        b.output("y", y).unwrap();
        let g = b.build().unwrap();
        let xv = FixedTensor::from_f64(&[1, 3], &[1.5, -2.0, 7.25]).unwrap();
        let inputs = named(&[("x", xv.clone()), ("z", FixedTensor::zeros(&[3]))]);
        let (out, trace) = execute(&g, &inputs).unwrap();
        assert_eq!(out["y"], xv);
        assert_eq!(trace.step_count(), linearize(&g).unwrap().step_count());
        let (_, again) = execute(&g, &inputs).unwrap();
        assert_eq!(trace.commitment, again.commitment);
    }

    #[test]
    fn zero_weights_give_bias() {
        let spec = ModelSpec::mlp(&[2, 2, 1], 0);
        let g = spec.inference_graph(1).unwrap();
        let inputs = named(&[
            ("x", FixedTensor::from_f64(&[1, 2], &[3.0, -4.0]).unwrap()),
            ("w0", FixedTensor::zeros(&[2, 2])),
            ("b0", FixedTensor::zeros(&[2])),
            ("w1", FixedTensor::zeros(&[2, 1])),
            ("b1", FixedTensor::from_f64(&[1], &[0.5]).unwrap()),
        ]);
        let (out, _) = execute(&g, &inputs).unwrap();
        assert_eq!(out["y"].data(), &[FixedPoint::dyadic(1, 1)]);
    }

    #[test]
    fn empty_program_has_single_leaf() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        b.output("x", x).unwrap();
        let g = b.build().unwrap();
        let inputs = named(&[("x", FixedTensor::zeros(&[2]))]);
        let (_, trace) = execute(&g, &inputs).unwrap();
        assert_eq!(trace.step_count(), 0);
        let p = merkle_proof(&trace, 0).unwrap();
        assert!(p.siblings.is_empty());
        assert_eq!(trace.root(), trace.state_hash(0).unwrap());
        assert!(merkle_proof(&trace, 1).is_err());
    }

    #[test]
    fn state_at_endpoints_and_folding_step() {
        let spec = ModelSpec::mlp(&[3, 4, 2], 0);
        let g = spec.inference_graph(2).unwrap();
        let p = linearize(&g).unwrap();
        let mut inputs = NamedTensors::new();
        inputs.insert(
            "x".into(),
            FixedTensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.0, 0.25, -0.75]).unwrap(),
        );
        for (name, shape) in spec.parameter_shapes() {
            let n: usize = shape.iter().map(|&d| d as usize).product();
            let vals: Vec<f64> = (0..n).map(|i| (i as f64 - 3.0) / 8.0).collect();
            inputs.insert(name, FixedTensor::from_f64(&shape, &vals).unwrap());
        }
        let exec = p.execute(&inputs).unwrap();
        let s0 = p.state_at(&inputs, 0).unwrap();
        assert_eq!(s0.state_hash(), exec.trace.state_hash(0).unwrap());
        let t = p.step_count();
        let st = p.state_at(&inputs, t).unwrap();
        assert_eq!(collect_outputs(p.layout(), &st), exec.outputs);
        let mut s = s0;
        for (i, op) in p.ops().iter().enumerate() {
            s = step(&s, op);
            assert_eq!(s.state_hash(), exec.trace.state_hash(i as u64 + 1).unwrap());
        }
        assert!(p.state_at(&inputs, t + 1).is_err());
    }

    #[test]
    fn missing_or_misshaped_input() {
        let g = ModelSpec::mlp(&[2, 1], 0).inference_graph(1).unwrap();
        let inputs = named(&[("x", FixedTensor::zeros(&[1, 2]))]);
        assert!(matches!(
            execute(&g, &inputs),
            Err(ExecError::MissingInput(_))
        ));
        let inputs = named(&[
            ("x", FixedTensor::zeros(&[1, 3])),
            ("w0", FixedTensor::zeros(&[2, 1])),
            ("b0", FixedTensor::zeros(&[1])),
        ]);
        assert!(matches!(
            execute(&g, &inputs),
            Err(ExecError::InputShape { .. })
        ));
    }
}
