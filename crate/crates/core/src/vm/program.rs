//! Linearization of a [`CompGraph`] into bounded-cost micro-ops.

use serde::{Deserialize, Serialize};

use super::fixed::FixedPoint;
use super::graph::{Axis, CompGraph, GraphError, Op};
use super::tensor::element_count;
use crate::hash::{Digest, MerkleProof, MerkleTree};

/// Maximum scalar multiplications (or elements) one micro-op may touch.
pub const SEGMENT_LEN: u32 = 256;
/// Upper bound on the gas cost of a single micro-op.
pub const MAX_OP_COST: u64 = 1024;

/// Base and per-element gas of one micro-op kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub base: u64,
    pub per_element: u64,
}

impl OpCost {
    pub fn of(&self, elements: u64) -> u64 {
        self.base + self.per_element * elements
    }
}

/// Per-kind micro-op costs. "Elements" are multiplications for dot products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub dot: OpCost,
    pub map: OpCost,
    pub sigmoid: OpCost,
    pub reduce: OpCost,
    pub argmax: OpCost,
}

impl CostTable {
    pub const DEFAULT: CostTable = CostTable {
        dot: OpCost {
            base: 16,
            per_element: 2,
        },
        map: OpCost {
            base: 8,
            per_element: 2,
        },
        sigmoid: OpCost {
            base: 8,
            per_element: 3,
        },
        reduce: OpCost {
            base: 8,
            per_element: 2,
        },
        argmax: OpCost {
            base: 8,
            per_element: 2,
        },
    };

    pub fn max_cost(&self) -> u64 {
        let l = SEGMENT_LEN as u64;
        [self.dot, self.map, self.sigmoid, self.reduce, self.argmax]
            .iter()
            .map(|c| c.of(l))
            .max()
            .unwrap()
    }
}

impl Default for CostTable {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapFn {
    Add,
    Sub,
    Mul,
    Scale(FixedPoint),
    Relu,
    ReluGrad,
    Sigmoid,
    AddBias,
}

impl MapFn {
    fn tag(&self) -> u8 {
        match self {
            MapFn::Add => 0,
            MapFn::Sub => 1,
            MapFn::Mul => 2,
            MapFn::Scale(_) => 3,
            MapFn::Relu => 4,
            MapFn::ReluGrad => 5,
            MapFn::Sigmoid => 6,
            MapFn::AddBias => 7,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(
            self,
            MapFn::Add | MapFn::Sub | MapFn::Mul | MapFn::ReluGrad | MapFn::AddBias
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MicroKind {
    /// Partial dot products for output row `row`, columns `[col_start, col_end)`,
    /// over inner indices `[k_start, k_end)`.
    Dot {
        a: u32,
        b: u32,
        transpose_a: bool,
        transpose_b: bool,
        row: u32,
        col_start: u32,
        col_end: u32,
        k_start: u32,
        k_end: u32,
        accumulate: bool,
    },
    /// Elementwise function over output elements `[start, end)`.
    Map {
        f: MapFn,
        a: u32,
        b: Option<u32>,
        start: u32,
        end: u32,
    },
    /// Sum of elements `[start, end)` along `axis` for output element `lane`.
    Reduce {
        src: u32,
        axis: Axis,
        lane: u32,
        start: u32,
        end: u32,
        accumulate: bool,
    },
    Argmax {
        src: u32,
        row: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MicroOp {
    #[serde(flatten)]
    pub kind: MicroKind,
    pub out: u32,
    /// Shape to allocate (zero-filled) in `out` before writing; set on the
    /// first micro-op of each graph node.
    pub alloc: Option<Vec<u32>>,
    pub cost: u64,
    pub flops: u64,
}

impl MicroOp {
    /// Slots read or written, sorted and deduplicated.
    pub fn touched_slots(&self) -> Vec<u32> {
        let mut s = match &self.kind {
            MicroKind::Dot { a, b, .. } => vec![*a, *b],
            MicroKind::Map { a, b, .. } => std::iter::once(*a).chain(*b).collect(),
            MicroKind::Reduce { src, .. } | MicroKind::Argmax { src, .. } => vec![*src],
        };
        s.push(self.out);
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(64);
        let u32s = |v: &mut Vec<u8>, xs: &[u32]| {
            xs.iter()
                .for_each(|x| v.extend_from_slice(&x.to_le_bytes()))
        };
        match &self.kind {
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
                v.push(0);
                u32s(
                    &mut v,
                    &[*a, *b, *row, *col_start, *col_end, *k_start, *k_end],
                );
                v.extend_from_slice(&[*transpose_a as u8, *transpose_b as u8, *accumulate as u8]);
            }
            MicroKind::Map {
                f,
                a,
                b,
                start,
                end,
            } => {
                v.push(1);
                v.push(f.tag());
                if let MapFn::Scale(k) = f {
                    v.extend_from_slice(&k.raw().to_le_bytes());
                }
                u32s(&mut v, &[*a, b.map_or(u32::MAX, |b| b), *start, *end]);
            }
            MicroKind::Reduce {
                src,
                axis,
                lane,
                start,
                end,
                accumulate,
            } => {
                v.push(2);
                v.push(matches!(axis, Axis::First) as u8);
                u32s(&mut v, &[*src, *lane, *start, *end]);
                v.push(*accumulate as u8);
            }
            MicroKind::Argmax { src, row } => {
                v.push(3);
                u32s(&mut v, &[*src, *row]);
            }
        }
        u32s(&mut v, &[self.out]);
        match &self.alloc {
            Some(shape) => {
                v.push(1);
                u32s(&mut v, &[shape.len() as u32]);
                u32s(&mut v, shape);
            }
            None => v.push(0),
        }
        v.extend_from_slice(&self.cost.to_le_bytes());
        v.extend_from_slice(&self.flops.to_le_bytes());
        v
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }
}

/// Memory layout of a program: one slot per graph value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub slot_shapes: Vec<Vec<u32>>,
    pub input_names: Vec<String>,
    pub input_slots: Vec<u32>,
    pub output_names: Vec<String>,
    pub output_slots: Vec<u32>,
}

impl Layout {
    pub fn slot_count(&self) -> u32 {
        self.slot_shapes.len() as u32
    }

    pub fn digest(&self) -> Digest {
        let mut v = Vec::new();
        let put = |v: &mut Vec<u8>, x: u32| v.extend_from_slice(&x.to_le_bytes());
        put(&mut v, self.slot_count());
        for s in &self.slot_shapes {
            put(&mut v, s.len() as u32);
            s.iter().for_each(|&d| put(&mut v, d));
        }
        put(&mut v, self.input_slots.len() as u32);
        self.input_slots.iter().for_each(|&d| put(&mut v, d));
        put(&mut v, self.output_slots.len() as u32);
        self.output_slots.iter().for_each(|&d| put(&mut v, d));
        for name in self.input_names.iter().chain(&self.output_names) {
            put(&mut v, name.len() as u32);
            v.extend_from_slice(name.as_bytes());
        }
        Digest::of(&v)
    }
}

/// What the arbiter needs to know about a program without holding its ops.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramHeader {
    pub ops_root: Digest,
    pub step_count: u64,
    pub layout: Layout,
}

impl ProgramHeader {
    pub fn program_hash(&self) -> Digest {
        program_hash(&self.ops_root, &self.layout)
    }

    pub fn ops_height(&self) -> u32 {
        crate::hash::tree_height(self.step_count as usize)
    }
}

fn program_hash(ops_root: &Digest, layout: &Layout) -> Digest {
    Digest::of_parts([ops_root.0.as_slice(), layout.digest().0.as_slice()])
}

/// A linearized graph.
#[derive(Clone, Debug)]
pub struct Program {
    ops: Vec<MicroOp>,
    layout: Layout,
    op_tree: Option<MerkleTree>,
    hash: Digest,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash && self.ops == other.ops
    }
}

impl Program {
    pub fn from_parts(ops: Vec<MicroOp>, layout: Layout) -> Self {
        let op_tree = (!ops.is_empty()).then(|| {
            let leaves: Vec<Digest> = ops.iter().map(MicroOp::digest).collect();
            MerkleTree::new(&leaves)
        });
        let ops_root = op_tree.as_ref().map_or(Digest::ZERO, MerkleTree::root);
        let hash = program_hash(&ops_root, &layout);
        Program {
            ops,
            layout,
            op_tree,
            hash,
        }
    }

    pub fn ops(&self) -> &[MicroOp] {
        &self.ops
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn step_count(&self) -> u64 {
        self.ops.len() as u64
    }

    pub fn hash(&self) -> Digest {
        self.hash
    }

    pub fn header(&self) -> ProgramHeader {
        ProgramHeader {
            ops_root: self.op_tree.as_ref().map_or(Digest::ZERO, MerkleTree::root),
            step_count: self.step_count(),
            layout: self.layout.clone(),
        }
    }

    pub fn op_proof(&self, pc: usize) -> Option<MerkleProof> {
        self.op_tree.as_ref()?.proof(pc)
    }

    pub fn total_flops(&self) -> u64 {
        self.ops.iter().map(|o| o.flops).sum()
    }

    pub fn total_cost(&self) -> u64 {
        self.ops.iter().map(|o| o.cost).sum()
    }
}

fn push(
    ops: &mut Vec<MicroOp>,
    kind: MicroKind,
    out: u32,
    alloc: &mut Option<Vec<u32>>,
    cost: u64,
    flops: u64,
) {
    assert!(cost <= MAX_OP_COST, "micro-op cost {cost} exceeds bound");
    ops.push(MicroOp {
        kind,
        out,
        alloc: alloc.take(),
        cost,
        flops,
    });
}

/// Turns a graph into its canonical micro-op sequence.
pub fn linearize(graph: &CompGraph) -> Result<Program, GraphError> {
    let costs = CostTable::DEFAULT;
    let l = SEGMENT_LEN;
    let n_inputs = graph.inputs().len() as u32;
    let mut ops = Vec::new();
    for (ni, node) in graph.nodes().iter().enumerate() {
        let out = n_inputs + ni as u32;
        if element_count(&node.shape) == 0 && !node.shape.is_empty() {
            return Err(GraphError::Invalid(format!(
                "node `{}` has an empty output",
                node.name
            )));
        }
        let mut alloc = Some(node.shape.clone());
        let ins: Vec<u32> = node.inputs.iter().map(|v| v.0).collect();
        let in_shape = |k: usize| graph.shape_of(node.inputs[k]);
        match &node.op {
            Op::Matmul {
                transpose_a,
                transpose_b,
            } => {
                let a = in_shape(0);
                let (m, k) = if *transpose_a {
                    (a[1], a[0])
                } else {
                    (a[0], a[1])
                };
                let n = node.shape[1];
                if k == 0 {
                    return Err(GraphError::Invalid(format!(
                        "node `{}` has an empty inner dimension",
                        node.name
                    )));
                }
                let cols_per_op = (l / k.min(l)).max(1);
                for row in 0..m {
                    let mut col_start = 0;
                    while col_start < n {
                        let col_end = (col_start + cols_per_op).min(n);
                        let mut k_start = 0;
                        while k_start < k {
                            let k_end = (k_start + l).min(k);
                            let mults = ((k_end - k_start) * (col_end - col_start)) as u64;
                            push(
                                &mut ops,
                                MicroKind::Dot {
                                    a: ins[0],
                                    b: ins[1],
                                    transpose_a: *transpose_a,
                                    transpose_b: *transpose_b,
                                    row,
                                    col_start,
                                    col_end,
                                    k_start,
                                    k_end,
                                    accumulate: k_start > 0,
                                },
                                out,
                                &mut alloc,
                                costs.dot.of(mults),
                                2 * mults,
                            );
                            k_start = k_end;
                        }
                        col_start = col_end;
                    }
                }
            }
            Op::SumReduce { axis } => {
                let src = in_shape(0);
                let (lanes, len) = match axis {
                    Axis::Last => (
                        element_count(&src[..src.len() - 1]) as u32,
                        *src.last().unwrap(),
                    ),
                    Axis::First => (src[1], src[0]),
                };
                for lane in 0..lanes {
                    let mut start = 0;
                    while start < len {
                        let end = (start + l).min(len);
                        let n = (end - start) as u64;
                        push(
                            &mut ops,
                            MicroKind::Reduce {
                                src: ins[0],
                                axis: *axis,
                                lane,
                                start,
                                end,
                                accumulate: start > 0,
                            },
                            out,
                            &mut alloc,
                            costs.reduce.of(n),
                            n,
                        );
                        start = end;
                    }
                }
            }
            Op::Argmax => {
                let src = in_shape(0);
                let cols = *src.last().unwrap();
                if cols > l {
                    return Err(GraphError::UnsupportedOp(format!(
                        "argmax over {cols} > {l} classes"
                    )));
                }
                let rows = element_count(&src[..src.len() - 1]) as u32;
                for row in 0..rows {
                    push(
                        &mut ops,
                        MicroKind::Argmax { src: ins[0], row },
                        out,
                        &mut alloc,
                        costs.argmax.of(cols as u64),
                        cols as u64,
                    );
                }
            }
            op => {
                let f = match op {
                    Op::AddBias => MapFn::AddBias,
                    Op::Add => MapFn::Add,
                    Op::Sub => MapFn::Sub,
                    Op::Mul => MapFn::Mul,
                    Op::ScalarMul { factor } => MapFn::Scale(*factor),
                    Op::Relu => MapFn::Relu,
                    Op::ReluGrad => MapFn::ReluGrad,
                    Op::SigmoidLut => MapFn::Sigmoid,
                    _ => unreachable!("handled above"),
                };
                let total = element_count(&node.shape) as u32;
                let cost = if matches!(f, MapFn::Sigmoid) {
                    costs.sigmoid
                } else {
                    costs.map
                };
                let mut start = 0;
                while start < total {
                    let end = (start + l).min(total);
                    let n = (end - start) as u64;
                    push(
                        &mut ops,
                        MicroKind::Map {
                            f,
                            a: ins[0],
                            b: ins.get(1).copied(),
                            start,
                            end,
                        },
                        out,
                        &mut alloc,
                        cost.of(n),
                        n,
                    );
                    start = end;
                }
            }
        }
    }

    let n_slots = graph.value_count();
    let slot_shapes = (0..n_slots)
        .map(|i| graph.shape_of(super::graph::ValueRef(i as u32)).to_vec())
        .collect();
    let layout = Layout {
        slot_shapes,
        input_names: graph.inputs().iter().map(|i| i.name.clone()).collect(),
        input_slots: (0..n_inputs).collect(),
        output_names: graph.outputs().iter().map(|(n, _)| n.clone()).collect(),
        output_slots: graph.outputs().iter().map(|(_, v)| v.0).collect(),
    };
    Ok(Program::from_parts(ops, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::graph::GraphBuilder;

    fn dot_graph(k: u32) -> CompGraph {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, k]).unwrap();
        let w = b.input("w", &[k, 1]).unwrap();
        let y = b.matmul("y", x, w).unwrap();
        b.output("y", y).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn dot_at_segment_bound_is_one_op() {
        assert_eq!(linearize(&dot_graph(256)).unwrap().step_count(), 1);
    }

    #[test]
    fn long_dot_is_split_into_chained_segments() {
        let p = linearize(&dot_graph(300)).unwrap();
        assert_eq!(p.step_count(), 2);
        match (&p.ops()[0].kind, &p.ops()[1].kind) {
            (
                MicroKind::Dot {
                    k_start: 0,
                    k_end: 256,
                    accumulate: false,
                    ..
                },
                MicroKind::Dot {
                    k_start: 256,
                    k_end: 300,
                    accumulate: true,
                    ..
                },
            ) => {}
            other => panic!("unexpected segments {other:?}"),
        }
        assert!(p.ops()[0].alloc.is_some() && p.ops()[1].alloc.is_none());
    }

    #[test]
    fn costs_respect_bound_and_linearization_is_stable() {
        let g = crate::vm::graph::ModelSpec::mlp(&[64, 32, 5], 0)
            .inference_graph(4)
            .unwrap();
        let p1 = linearize(&g).unwrap();
        let p2 = linearize(&g).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.ops().iter().all(|o| o.cost <= MAX_OP_COST));
        assert!(p1.total_flops() > 0);
    }

    #[test]
    fn default_cost_table_fits_bound() {
        assert!(CostTable::DEFAULT.max_cost() <= MAX_OP_COST);
    }

    #[test]
    fn header_hash_matches_program_hash() {
        let p = linearize(&dot_graph(3)).unwrap();
        assert_eq!(p.header().program_hash(), p.hash());
    }
}
