//! The two pipeline models: a signature embedding compared by squared
//! distance, and an 8×8 mark reader with an "unidentifiable" class.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::provenance::{Minibatch, Model};
use crate::vm::trace::{ExecError, NamedTensors};
use crate::vm::{
    linearize, Axis, FixedPoint, FixedTensor, GraphBuilder, GraphError, LayerSpec, ModelSpec, Op,
    Program,
};

pub const SIGNATURE_DIM: u32 = 16;
pub const EMBED_DIM: u32 = 8;
pub const READER_HIDDEN: u32 = 32;
pub const GRID: u32 = 8;
pub const MAX_CANDIDATES: u32 = 4;

pub const SIGNATURE_MODEL: &str = "signature";
pub const READER_MODEL: &str = "vote-reader";

pub fn signature_spec(seed: u64) -> ModelSpec {
    ModelSpec::mlp(&[SIGNATURE_DIM, 32, EMBED_DIM], seed)
}

/// `64 → 32 → C+1` with argmax; class `C` means unidentifiable.
pub fn reader_spec(candidates: u32, seed: u64) -> ModelSpec {
    let mut s = ModelSpec::mlp(&[GRID * GRID, READER_HIDDEN, candidates + 1], seed);
    s.layers.push(LayerSpec::activation("argmax"));
    s
}

/// Seeded dyadic embedding, see [`Model::dyadic`].
pub fn signature_m0(seed: u64) -> Model {
    Model::dyadic(SIGNATURE_MODEL, signature_spec(seed)).expect("valid spec")
}

/// Quadrant index of grid cell `(r, c)`: 0 top-left, 1 top-right, 2
/// bottom-left, 3 bottom-right.
pub fn quadrant(r: u32, c: u32) -> u32 {
    let h = GRID / 2;
    (r / h) * 2 + c / h
}

/// Hand-initialized reader. Hidden units 0..4 average one quadrant each;
/// `logit_c = 2·h_c - Σ_{q≠c} h_q` and the unidentifiable logit is a
/// constant `1/2`. The remaining hidden units carry small seeded weights so
/// training has something to move.
pub fn reader_m0(candidates: u32, seed: u64) -> Model {
    assert!((1..=MAX_CANDIDATES).contains(&candidates));
    let spec = reader_spec(candidates, seed);
    let (cells, hidden, out) = (
        (GRID * GRID) as usize,
        READER_HIDDEN as usize,
        candidates as usize + 1,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w0 = vec![FixedPoint::ZERO; cells * hidden];
    for r in 0..GRID {
        for c in 0..GRID {
            let cell = (r * GRID + c) as usize;
            w0[cell * hidden + quadrant(r, c) as usize] = FixedPoint::dyadic(1, 4);
            for j in MAX_CANDIDATES as usize..hidden {
                w0[cell * hidden + j] = FixedPoint::dyadic(rng.gen_range(-1i64..=1), 6);
            }
        }
    }
    let mut w1 = vec![FixedPoint::ZERO; hidden * out];
    for q in 0..MAX_CANDIDATES as usize {
        for k in 0..candidates as usize {
            w1[q * out + k] = FixedPoint::from_int(if q == k { 2 } else { -1 });
        }
    }
    for j in MAX_CANDIDATES as usize..hidden {
        for k in 0..out {
            w1[j * out + k] = FixedPoint::dyadic(rng.gen_range(-1i64..=1), 8);
        }
    }
    let mut b1 = vec![FixedPoint::ZERO; out];
    b1[candidates as usize] = FixedPoint::dyadic(1, 1);
    let mut p = NamedTensors::new();
    p.insert(
        "w0".into(),
        FixedTensor::new(vec![GRID * GRID, READER_HIDDEN], w0).expect("shape"),
    );
    p.insert(
        "b0".into(),
        FixedTensor::new(vec![READER_HIDDEN], vec![FixedPoint::ZERO; hidden]).expect("shape"),
    );
    p.insert(
        "w1".into(),
        FixedTensor::new(vec![READER_HIDDEN, candidates + 1], w1).expect("shape"),
    );
    p.insert(
        "b1".into(),
        FixedTensor::new(vec![candidates + 1], b1).expect("shape"),
    );
    Model::new(READER_MODEL, spec, &p).expect("valid parameters")
}

/// Distance graph: both vectors through the shared embedding, then
/// `Σ (e_ref - e_scan)²`. Inputs `ref`, `scan` `[1, 16]` and the embedding
/// parameters; output `distance` `[1]`.
pub fn signature_program(spec: &ModelSpec) -> Result<Arc<Program>, GraphError> {
    let mut b = GraphBuilder::new();
    let r = b.input("ref", &[1, SIGNATURE_DIM])?;
    let s = b.input("scan", &[1, SIGNATURE_DIM])?;
    for (name, shape) in spec.parameter_shapes() {
        b.input(&name, &shape)?;
    }
    let er = spec.append_forward(&mut b, "", "ref.", r)?.output;
    let es = spec.append_forward(&mut b, "", "scan.", s)?.output;
    let d = b.node("diff", Op::Sub, &[er, es])?;
    let sq = b.node("diff.sq", Op::Mul, &[d, d])?;
    let dist = b.node("distance", Op::SumReduce { axis: Axis::Last }, &[sq])?;
    b.output("distance", dist)?;
    Ok(Arc::new(linearize(&b.build()?)?))
}

pub fn signature_inputs(
    model: &Model,
    reference: &FixedTensor,
    scan: &FixedTensor,
) -> NamedTensors {
    let mut inputs = model.params.clone();
    inputs.insert("ref".into(), reference.clone());
    inputs.insert("scan".into(), scan.clone());
    inputs
}

/// Reader graph over one `[1, 64]` image; output `class` `[1, 1]`.
pub fn reader_program(spec: &ModelSpec) -> Result<Arc<Program>, GraphError> {
    Ok(Arc::new(linearize(&spec.inference_graph(1)?)?))
}

pub fn reader_inputs(model: &Model, image: &FixedTensor) -> NamedTensors {
    let mut inputs = model.params.clone();
    inputs.insert("x".into(), image.clone());
    inputs
}

/// Local single-machine run of the distance graph.
pub fn local_distance(
    program: &Program,
    model: &Model,
    reference: &FixedTensor,
    scan: &FixedTensor,
) -> Result<FixedPoint, ExecError> {
    let exec = program.execute(&signature_inputs(model, reference, scan))?;
    Ok(exec.outputs["distance"].data()[0])
}

/// Local single-machine run of the reader: the raw class index.
pub fn local_read(program: &Program, model: &Model, image: &FixedTensor) -> Result<u32, ExecError> {
    let exec = program.execute(&reader_inputs(model, image))?;
    Ok(class_of(&exec.outputs))
}

pub(crate) fn class_of(outputs: &NamedTensors) -> u32 {
    let v = outputs.values().next().expect("one output").data()[0];
    (v.raw() >> 16).max(0) as u32
}

/// Signature-embedding training data: random signature-like vectors with
/// targets on the `1/8` grid.
pub fn signature_training_stream(spec: &ModelSpec, n: u32, seed: u64) -> Vec<Minibatch> {
    crate::provenance::synthetic_stream(spec, n, 4, seed)
}

/// Reader training data: rendered clear marks with ideal logits `2` for the
/// marked candidate, `-1` for the others, `1/2` unidentifiable; noise images
/// with `-1/2` everywhere but `1/2` unidentifiable.
pub fn reader_training_stream(candidates: u32, n: u32, seed: u64) -> Vec<Minibatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 4u32;
    let out = candidates + 1;
    (0..n)
        .map(|_| {
            let mut xs = Vec::new();
            let mut ts = Vec::new();
            for _ in 0..batch {
                let mark = rng.gen_range(0..=candidates);
                if mark < candidates {
                    xs.extend(super::ballots::render_clear(mark, &mut rng));
                    ts.extend((0..out).map(|k| match k {
                        k if k == mark => FixedPoint::from_int(2),
                        k if k == candidates => FixedPoint::dyadic(1, 1),
                        _ => FixedPoint::from_int(-1),
                    }));
                } else {
                    xs.extend(super::ballots::render_unclear(&mut rng));
                    ts.extend(
                        (0..out)
                            .map(|k| FixedPoint::dyadic(if k == candidates { 1 } else { -1 }, 1)),
                    );
                }
            }
            Minibatch {
                x: FixedTensor::new(vec![batch, GRID * GRID], xs).expect("shape"),
                t: FixedTensor::new(vec![batch, out], ts).expect("shape"),
            }
        })
        .collect()
}
