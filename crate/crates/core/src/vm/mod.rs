//! Deterministic fixed-point virtual machine.
//!
//! A [`CompGraph`] is linearized into a [`Program`] of bounded micro-ops. Every
//! intermediate [`VmState`] is hashed, and the state hashes are committed in a
//! Merkle tree ([`TraceCommitment`]) that dispute games bisect over.

pub mod fixed;
pub mod graph;
pub mod program;
pub mod state;
pub mod tensor;
pub mod trace;

pub use fixed::FixedPoint;
pub use graph::{
    build_graph, Axis, CompGraph, GraphBuilder, GraphError, GraphSpec, LayerSpec, ModelSpec, Op,
    ValueRef,
};
pub use program::{
    linearize, Layout, MapFn, MicroKind, MicroOp, Program, ProgramHeader, MAX_OP_COST, SEGMENT_LEN,
};
pub use state::{state_hash, step, StateOpening, VmState, FAULT_PC};
pub use tensor::FixedTensor;
pub use trace::{
    execute, merkle_proof, state_at, tensors_hash, ExecError, Execution, NamedTensors, Trace,
    TraceCommitment, TraceFixture,
};
