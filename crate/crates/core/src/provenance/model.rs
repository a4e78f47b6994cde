use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::Digest;
use crate::vm::trace::{tensors_hash, NamedTensors};
use crate::vm::{FixedPoint, FixedTensor, GraphError, ModelSpec};

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Spec(#[from] GraphError),
    #[error("parameter `{0}` missing")]
    Missing(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<u32>,
        actual: Vec<u32>,
    },
}

/// Architecture plus parameters. The hash covers both, not the name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub name: String,
    pub spec: ModelSpec,
    pub params: NamedTensors,
}

impl Model {
    /// Keeps exactly the parameters the spec declares.
    pub fn new(
        name: impl Into<String>,
        spec: ModelSpec,
        params: &NamedTensors,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut kept = NamedTensors::new();
        for (p, shape) in spec.parameter_shapes() {
            let t = params
                .get(&p)
                .ok_or_else(|| ModelError::Missing(p.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape {
                    name: p,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            kept.insert(p, t.clone());
        }
        Ok(Model {
            name: name.into(),
            spec,
            params: kept,
        })
    }

    pub fn hash(&self) -> Digest {
        let spec = Digest::of(
            serde_json::to_string(&self.spec)
                .expect("specs serialize")
                .as_bytes(),
        );
        let order = self.spec.parameter_shapes();
        let params = tensors_hash(order.iter().map(|(n, _)| &self.params[n]));
        Digest::combine(&spec, &params)
    }

    pub fn param(&self, name: &str) -> &FixedTensor {
        &self.params[name]
    }

    /// Seeded dyadic initialization: weights `k/8` with `k` in `[-4, 4]`,
    /// first-layer biases odd multiples of `2^-7` in `[-9/128, 9/128]`,
    /// later biases `k/8` with `k` in `[-2, 2]`.
    ///
    /// With inputs on the `1/8` grid, a two-layer forward and backward pass
    /// stays exact in Q16.16 except for one truncation per output-layer
    /// weight gradient, and no first-layer pre-activation is ever zero.
    pub fn dyadic(name: impl Into<String>, spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = NamedTensors::new();
        for (p, shape) in spec.parameter_shapes() {
            let n: usize = shape.iter().map(|&d| d as usize).product();
            let vals: Vec<FixedPoint> = (0..n)
                .map(|_| match p.as_str() {
                    "b0" => FixedPoint::dyadic(2 * rng.gen_range(-5i64..=4) + 1, 7),
                    b if b.starts_with('b') => FixedPoint::dyadic(rng.gen_range(-2i64..=2), 3),
                    _ => FixedPoint::dyadic(rng.gen_range(-4i64..=4), 3),
                })
                .collect();
            params.insert(
                p,
                FixedTensor::new(shape, vals).expect("length matches shape"),
            );
        }
        Model::new(name, spec, &params)
    }
}

/// One minibatch `D_i`: inputs `x` `[b, in]` and targets `t` `[b, out]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Minibatch {
    pub x: FixedTensor,
    pub t: FixedTensor,
}

impl Minibatch {
    pub fn hash(&self) -> Digest {
        tensors_hash([&self.x, &self.t])
    }

    pub fn batch(&self) -> u32 {
        self.x.shape().first().copied().unwrap_or(0)
    }
}

/// Seeded stream of `n` minibatches with inputs and targets on the `1/8`
/// grid in `[-1, 1]`.
pub fn synthetic_stream(spec: &ModelSpec, n: u32, batch: u32, seed: u64) -> Vec<Minibatch> {
    let (din, dout) = (spec.input_width().unwrap_or(1), trainable_width(spec));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = |len: usize| -> Vec<FixedPoint> {
        (0..len)
            .map(|_| FixedPoint::dyadic(rng.gen_range(-8i64..=8), 3))
            .collect()
    };
    (0..n)
        .map(|_| Minibatch {
            x: FixedTensor::new(vec![batch, din], grid((batch * din) as usize)).expect("shape"),
            t: FixedTensor::new(vec![batch, dout], grid((batch * dout) as usize)).expect("shape"),
        })
        .collect()
}

/// Width of the last dense layer, which training targets.
pub(crate) fn trainable_width(spec: &ModelSpec) -> u32 {
    spec.output_width().unwrap_or(1)
}
