//! Simulator for postal ballot counting whose vision computations and model
//! training are checked by a committee of scrutineers, with disagreements
//! settled by a bisection dispute game on a simulated layer-1 arbiter.

// Errors are cold and carry diagnostic context; boxing them buys nothing.
#![allow(clippy::result_large_err)]

pub mod arbiter;
pub mod committee;
pub mod demo;
pub mod hash;
pub mod pipeline;
pub mod provenance;
pub mod vm;

pub use hash::{Digest, MerkleProof, MerkleTree};
pub use vm::{CompGraph, FixedPoint, FixedTensor, Program, TraceCommitment};
