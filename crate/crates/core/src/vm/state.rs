//! VM state and the single-step transition function.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fixed::{self, FixedPoint};
use super::graph::Axis;
use super::program::{Layout, MapFn, MicroKind, MicroOp};
use super::tensor::{element_count, FixedTensor};
use crate::hash::{Digest, MerkleProof, MerkleTree};

/// Program counter of a faulted state. Stepping a faulted state is the identity.
pub const FAULT_PC: u64 = u64::MAX;

/// `SHA-256(pc ‖ overflow ‖ memory_root)`.
pub fn state_hash(pc: u64, overflow: bool, memory_root: &Digest) -> Digest {
    Digest::of_parts([
        pc.to_le_bytes().as_slice(),
        &[overflow as u8],
        memory_root.0.as_slice(),
    ])
}

/// Leaf hash of a memory slot; empty slots hash to the zero leaf.
pub fn slot_leaf(slot: Option<&FixedTensor>) -> Digest {
    slot.map_or(Digest::ZERO, FixedTensor::digest)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Fault {
    #[error("slot {0} is empty")]
    EmptySlot(u32),
    #[error("slot {0} is not part of the opening")]
    NotOpened(u32),
    #[error("index out of range in slot {0}")]
    BadIndex(u32),
}

/// Result of evaluating one micro-op against a memory view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Effect {
    pub out: u32,
    pub alloc: Option<Vec<u32>>,
    pub start: usize,
    pub values: Vec<FixedPoint>,
    pub overflow: bool,
}

fn matrix_dims(t: &FixedTensor, slot: u32) -> Result<(usize, usize), Fault> {
    match t.shape() {
        [r, c] => Ok((*r as usize, *c as usize)),
        _ => Err(Fault::BadIndex(slot)),
    }
}

/// Evaluates `op` reading operands through `read`. Reads are side-effect free;
/// the returned [`Effect`] describes the single contiguous write.
pub fn evaluate<'a, F>(op: &MicroOp, read: F) -> Result<Effect, Fault>
where
    F: Fn(u32) -> Result<Option<&'a FixedTensor>, Fault>,
{
    let get =
        |slot: u32| -> Result<&'a FixedTensor, Fault> { read(slot)?.ok_or(Fault::EmptySlot(slot)) };
    let current_out = |idx: usize| -> Result<FixedPoint, Fault> {
        if op.alloc.is_some() {
            return Ok(FixedPoint::ZERO);
        }
        get(op.out)?
            .data()
            .get(idx)
            .copied()
            .ok_or(Fault::BadIndex(op.out))
    };
    let mut overflow = false;
    let (start, values) = match &op.kind {
        MicroKind::Dot {
            a,
            b,
            transpose_a,
            transpose_b,
            row,
            col_start,
            col_end,
            k_start,
            k_end,
            accumulate,
        } => {
            let (ta, tb) = (get(*a)?, get(*b)?);
            let (ar, ac) = matrix_dims(ta, *a)?;
            let (br, bc) = matrix_dims(tb, *b)?;
            let (m, ka) = if *transpose_a { (ac, ar) } else { (ar, ac) };
            let (kb, n) = if *transpose_b { (bc, br) } else { (br, bc) };
            let (row, c0, c1, k0, k1) = (
                *row as usize,
                *col_start as usize,
                *col_end as usize,
                *k_start as usize,
                *k_end as usize,
            );
            if row >= m || c1 > n || c0 >= c1 || k1 > ka || k1 > kb || k0 >= k1 {
                return Err(Fault::BadIndex(op.out));
            }
            let a_at = |k: usize| {
                if *transpose_a {
                    ta.data()[k * ac + row]
                } else {
                    ta.data()[row * ac + k]
                }
            };
            let b_at = |k: usize, j: usize| {
                if *transpose_b {
                    tb.data()[j * bc + k]
                } else {
                    tb.data()[k * bc + j]
                }
            };
            let mut vals = Vec::with_capacity(c1 - c0);
            for j in c0..c1 {
                let (partial, ov) = fixed::dot((k0..k1).map(|k| (a_at(k), b_at(k, j))));
                overflow |= ov;
                let v = if *accumulate {
                    let (s, ov) = current_out(row * n + j)?.add(partial);
                    overflow |= ov;
                    s
                } else {
                    partial
                };
                vals.push(v);
            }
            (row * n + c0, vals)
        }
        MicroKind::Map {
            f,
            a,
            b,
            start,
            end,
        } => {
            let ta = get(*a)?;
            let tb = match b {
                Some(b) => Some(get(*b)?),
                None if f.is_binary() => return Err(Fault::BadIndex(op.out)),
                None => None,
            };
            let (s, e) = (*start as usize, *end as usize);
            if e > ta.len() || s >= e {
                return Err(Fault::BadIndex(op.out));
            }
            let mut vals = Vec::with_capacity(e - s);
            for i in s..e {
                let x = ta.data()[i];
                let rhs = |idx: usize| -> Result<FixedPoint, Fault> {
                    tb.and_then(|t| t.data().get(idx).copied())
                        .ok_or(Fault::BadIndex(op.out))
                };
                let (v, ov) = match f {
                    MapFn::Add => x.add(rhs(i)?),
                    MapFn::Sub => x.sub(rhs(i)?),
                    MapFn::Mul => x.mul(rhs(i)?),
                    MapFn::Scale(k) => x.mul(*k),
                    MapFn::Relu => (x.relu(), false),
                    MapFn::Sigmoid => (x.sigmoid(), false),
                    MapFn::ReluGrad => {
                        // `a` is the incoming gradient, `b` the pre-activation.
                        (
                            if rhs(i)?.raw() > 0 {
                                x
                            } else {
                                FixedPoint::ZERO
                            },
                            false,
                        )
                    }
                    MapFn::AddBias => {
                        let cols = tb.map_or(1, |t| t.len()).max(1);
                        x.add(rhs(i % cols)?)
                    }
                };
                overflow |= ov;
                vals.push(v);
            }
            (s, vals)
        }
        MicroKind::Reduce {
            src,
            axis,
            lane,
            start,
            end,
            accumulate,
        } => {
            let t = get(*src)?;
            let (s, e, lane) = (*start as usize, *end as usize, *lane as usize);
            let sum: i128 = match axis {
                Axis::Last => {
                    let len = *t.shape().last().ok_or(Fault::BadIndex(*src))? as usize;
                    if e > len || s >= e || (lane + 1) * len > t.len() {
                        return Err(Fault::BadIndex(*src));
                    }
                    t.data()[lane * len + s..lane * len + e]
                        .iter()
                        .map(|v| v.raw() as i128)
                        .sum()
                }
                Axis::First => {
                    let (rows, cols) = matrix_dims(t, *src)?;
                    if e > rows || s >= e || lane >= cols {
                        return Err(Fault::BadIndex(*src));
                    }
                    (s..e)
                        .map(|r| t.data()[r * cols + lane].raw() as i128)
                        .sum()
                }
            };
            let base = if *accumulate {
                current_out(lane)?.raw() as i128
            } else {
                0
            };
            let (v, ov) = fixed::saturate(base + sum);
            overflow |= ov;
            (lane, vec![v])
        }
        MicroKind::Argmax { src, row } => {
            let t = get(*src)?;
            let cols = *t.shape().last().ok_or(Fault::BadIndex(*src))? as usize;
            let row = *row as usize;
            if cols == 0 || (row + 1) * cols > t.len() {
                return Err(Fault::BadIndex(*src));
            }
            let slice = &t.data()[row * cols..(row + 1) * cols];
            let mut best = 0usize;
            for (i, v) in slice.iter().enumerate() {
                if *v > slice[best] {
                    best = i;
                }
            }
            (row, vec![FixedPoint::from_int(best as i32)])
        }
    };
    Ok(Effect {
        out: op.out,
        alloc: op.alloc.clone(),
        start,
        values,
        overflow,
    })
}

/// Applies an effect to a slot, returning the new tensor.
pub fn write_effect(current: Option<&FixedTensor>, effect: &Effect) -> Result<FixedTensor, Fault> {
    let mut t = match (&effect.alloc, current) {
        (Some(shape), _) => FixedTensor::zeros(shape),
        (None, Some(t)) => t.clone(),
        (None, None) => return Err(Fault::EmptySlot(effect.out)),
    };
    let end = effect.start + effect.values.len();
    if end > t.len()
        || (effect.alloc.is_some() && element_count(t.shape()) == 0 && !t.shape().is_empty())
    {
        return Err(Fault::BadIndex(effect.out));
    }
    t.data_mut()[effect.start..end].copy_from_slice(&effect.values);
    Ok(t)
}

/// Full VM state: program counter, memory slots, sticky overflow flag.
#[derive(Clone, Debug)]
pub struct VmState {
    pc: u64,
    overflow: bool,
    memory: Vec<Option<Arc<FixedTensor>>>,
    tree: MerkleTree,
}

impl PartialEq for VmState {
    fn eq(&self, other: &Self) -> bool {
        self.pc == other.pc && self.overflow == other.overflow && self.memory == other.memory
    }
}

impl VmState {
    /// State with the given slots populated and all others empty.
    pub fn new(slot_count: usize, populated: impl IntoIterator<Item = (u32, FixedTensor)>) -> Self {
        let mut memory: Vec<Option<Arc<FixedTensor>>> = vec![None; slot_count.max(1)];
        for (i, t) in populated {
            memory[i as usize] = Some(Arc::new(t));
        }
        memory.truncate(slot_count.max(1));
        let leaves: Vec<Digest> = memory.iter().map(|s| slot_leaf(s.as_deref())).collect();
        VmState {
            pc: 0,
            overflow: false,
            tree: MerkleTree::new(&leaves),
            memory,
        }
    }

    pub fn pc(&self) -> u64 {
        self.pc
    }

    pub fn overflow(&self) -> bool {
        self.overflow
    }

    pub fn is_faulted(&self) -> bool {
        self.pc == FAULT_PC
    }

    pub fn slot(&self, i: u32) -> Option<&FixedTensor> {
        self.memory.get(i as usize).and_then(|s| s.as_deref())
    }

    pub fn slot_count(&self) -> usize {
        self.memory.len()
    }

    pub fn memory_root(&self) -> Digest {
        self.tree.root()
    }

    pub fn state_hash(&self) -> Digest {
        state_hash(self.pc, self.overflow, &self.memory_root())
    }

    pub fn slot_proof(&self, i: u32) -> Option<MerkleProof> {
        self.tree.proof(i as usize)
    }

    fn set_slot(&mut self, i: u32, t: FixedTensor) {
        self.tree.update(i as usize, t.digest());
        self.memory[i as usize] = Some(Arc::new(t));
    }

    /// Replaces element `idx` of slot `i`; used to fabricate divergent states.
    pub fn overwrite_element(&mut self, i: u32, idx: usize, v: FixedPoint) -> bool {
        let Some(mut t) = self.slot(i).cloned() else {
            return false;
        };
        if idx >= t.len() {
            return false;
        }
        t.data_mut()[idx] = v;
        self.set_slot(i, t);
        true
    }

    /// In-place transition. A fault moves the state to [`FAULT_PC`] and leaves
    /// memory untouched.
    pub fn apply(&mut self, op: &MicroOp) {
        if self.is_faulted() {
            return;
        }
        let memory = &self.memory;
        let read = |s: u32| -> Result<Option<&FixedTensor>, Fault> {
            memory
                .get(s as usize)
                .map(|x| x.as_deref())
                .ok_or(Fault::BadIndex(s))
        };
        let result = evaluate(op, read).and_then(|eff| {
            let t = write_effect(self.slot(eff.out), &eff)?;
            Ok((eff, t))
        });
        match result {
            Ok((eff, t)) if (eff.out as usize) < self.memory.len() => {
                self.overflow |= eff.overflow;
                self.set_slot(eff.out, t);
                self.pc += 1;
            }
            _ => self.pc = FAULT_PC,
        }
    }

    /// Opening of the slots `op` touches, for one-step verification.
    pub fn open(&self, slots: &[u32]) -> StateOpening {
        StateOpening {
            pc: self.pc,
            overflow: self.overflow,
            memory_root: self.memory_root(),
            slots: slots
                .iter()
                .filter(|&&s| (s as usize) < self.memory.len())
                .map(|&s| SlotOpening {
                    slot: s,
                    content: self.slot(s).cloned(),
                    proof: self.slot_proof(s).expect("slot in range"),
                })
                .collect(),
        }
    }
}

/// Pure transition: successor of `state` under `op`.
pub fn step(state: &VmState, op: &MicroOp) -> VmState {
    let mut next = state.clone();
    next.apply(op);
    next
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOpening {
    pub slot: u32,
    pub content: Option<FixedTensor>,
    pub proof: MerkleProof,
}

/// Partial view of a state: header fields plus selected slots with proofs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateOpening {
    pub pc: u64,
    pub overflow: bool,
    pub memory_root: Digest,
    pub slots: Vec<SlotOpening>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OpeningError {
    #[error("opening does not hash to the agreed state")]
    StateMismatch,
    #[error("membership proof for slot {0} does not verify")]
    BadSlotProof(u32),
    #[error("slot {0} required by the op was not opened")]
    MissingSlot(u32),
}

impl StateOpening {
    pub fn state_hash(&self) -> Digest {
        state_hash(self.pc, self.overflow, &self.memory_root)
    }

    /// Checks the opening against an agreed state hash and memory layout.
    pub fn verify(&self, expected: &Digest, layout: &Layout) -> Result<usize, OpeningError> {
        if self.state_hash() != *expected {
            return Err(OpeningError::StateMismatch);
        }
        let mut hashes = 0;
        for s in &self.slots {
            let leaf = slot_leaf(s.content.as_ref());
            if s.proof.index != s.slot as u64
                || !s
                    .proof
                    .verify(&self.memory_root, &leaf, layout.slot_count() as u64)
            {
                return Err(OpeningError::BadSlotProof(s.slot));
            }
            hashes += s.proof.siblings.len();
        }
        Ok(hashes)
    }

    /// Re-executes `op` against the opened slots and returns the post-state hash.
    pub fn successor_hash(&self, op: &MicroOp) -> Result<Digest, OpeningError> {
        if self.pc == FAULT_PC {
            return Ok(self.state_hash());
        }
        let map: BTreeMap<u32, &SlotOpening> = self.slots.iter().map(|s| (s.slot, s)).collect();
        for s in op.touched_slots() {
            if !map.contains_key(&s) {
                return Err(OpeningError::MissingSlot(s));
            }
        }
        let read = |s: u32| -> Result<Option<&FixedTensor>, Fault> {
            map.get(&s)
                .map(|o| o.content.as_ref())
                .ok_or(Fault::NotOpened(s))
        };
        let outcome = evaluate(op, read).and_then(|eff| {
            let t = write_effect(map[&eff.out].content.as_ref(), &eff)?;
            Ok((eff, t))
        });
        match outcome {
            Ok((eff, t)) => {
                let root = map[&eff.out].proof.root_for(&t.digest());
                Ok(state_hash(
                    self.pc + 1,
                    self.overflow || eff.overflow,
                    &root,
                ))
            }
            Err(Fault::NotOpened(s)) => Err(OpeningError::MissingSlot(s)),
            Err(_) => Ok(state_hash(FAULT_PC, self.overflow, &self.memory_root)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_op(f: MapFn, a: u32, b: Option<u32>, out: u32, n: u32) -> MicroOp {
        MicroOp {
            kind: MicroKind::Map {
                f,
                a,
                b,
                start: 0,
                end: n,
            },
            out,
            alloc: Some(vec![n]),
            cost: 8 + 2 * n as u64,
            flops: n as u64,
        }
    }

    #[test]
    fn dot_product_accumulates_exactly() {
        let a = FixedTensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let b = FixedTensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        let s = VmState::new(3, [(0, a), (1, b)]);
        let op = MicroOp {
            kind: MicroKind::Dot {
                a: 0,
                b: 1,
                transpose_a: false,
                transpose_b: false,
                row: 0,
                col_start: 0,
                col_end: 1,
                k_start: 0,
                k_end: 2,
                accumulate: false,
            },
            out: 2,
            alloc: Some(vec![1, 1]),
            cost: 20,
            flops: 4,
        };
        let n = step(&s, &op);
        assert_eq!(n.pc(), 1);
        assert_eq!(n.slot(2).unwrap().data()[0], FixedPoint::from_int(11));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = FixedTensor::from_f64(&[2], &[-1.5, 2.25]).unwrap();
        let s = step(
            &VmState::new(2, [(0, x)]),
            &map_op(MapFn::Relu, 0, None, 1, 2),
        );
        assert_eq!(
            s.slot(1).unwrap(),
            &FixedTensor::from_f64(&[2], &[0.0, 2.25]).unwrap()
        );
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = FixedTensor::zeros(&[1]);
        let s = step(
            &VmState::new(2, [(0, x)]),
            &map_op(MapFn::Sigmoid, 0, None, 1, 1),
        );
        assert_eq!(s.slot(1).unwrap().data()[0], FixedPoint::dyadic(1, 1));
    }

    #[test]
    fn empty_operand_faults_and_stays_faulted() {
        let s = VmState::new(2, []);
        let op = map_op(MapFn::Relu, 0, None, 1, 1);
        let f = step(&s, &op);
        assert!(f.is_faulted());
        assert_eq!(f.memory_root(), s.memory_root());
        assert_eq!(step(&f, &op).state_hash(), f.state_hash());
    }

    #[test]
    fn overflow_is_sticky() {
        let big = FixedTensor::from_raw(&[1], &[fixed::RAW_MAX]).unwrap();
        let s = VmState::new(3, [(0, big)]);
        let s = step(&s, &map_op(MapFn::Add, 0, Some(0), 1, 1));
        assert!(s.overflow());
        let s = step(&s, &map_op(MapFn::Relu, 0, None, 2, 1));
        assert!(s.overflow());
    }

    #[test]
    fn opening_reproduces_successor_hash() {
        let x = FixedTensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let s = VmState::new(5, [(0, x.clone()), (1, x)]);
        let op = map_op(MapFn::Mul, 0, Some(1), 3, 3);
        let opening = s.open(&op.touched_slots());
        let layout = Layout {
            slot_shapes: vec![vec![3]; 5],
            input_names: vec![],
            input_slots: vec![],
            output_names: vec![],
            output_slots: vec![],
        };
        opening.verify(&s.state_hash(), &layout).unwrap();
        assert_eq!(
            opening.successor_hash(&op).unwrap(),
            step(&s, &op).state_hash()
        );

        let mut bad = opening.clone();
        bad.slots[0].content = Some(FixedTensor::zeros(&[3]));
        assert_eq!(
            bad.verify(&s.state_hash(), &layout),
            Err(OpeningError::BadSlotProof(0))
        );
    }
}
