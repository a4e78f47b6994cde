use serde::{Deserialize, Serialize};

use super::fixed::FixedPoint;
use crate::hash::Digest;

/// Row-major tensor of Q16.16 values. An empty shape is a scalar.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct FixedTensor {
    shape: Vec<u32>,
    data: Vec<FixedPoint>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("tensor shape {shape:?} needs {expected} elements, got {actual}")]
pub struct TensorShapeError {
    pub shape: Vec<u32>,
    pub expected: usize,
    pub actual: usize,
}

pub fn element_count(shape: &[u32]) -> usize {
    shape.iter().map(|&d| d as usize).product()
}

impl FixedTensor {
    pub fn new(shape: Vec<u32>, data: Vec<FixedPoint>) -> Result<Self, TensorShapeError> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(TensorShapeError {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(FixedTensor { shape, data })
    }

    pub fn zeros(shape: &[u32]) -> Self {
        FixedTensor {
            shape: shape.to_vec(),
            data: vec![FixedPoint::ZERO; element_count(shape)],
        }
    }

    pub fn scalar(v: FixedPoint) -> Self {
        FixedTensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_raw(shape: &[u32], raw: &[i64]) -> Result<Self, TensorShapeError> {
        Self::new(
            shape.to_vec(),
            raw.iter().map(|&r| FixedPoint::from_raw(r)).collect(),
        )
    }

    pub fn from_f64(shape: &[u32], vals: &[f64]) -> Result<Self, TensorShapeError> {
        Self::new(
            shape.to_vec(),
            vals.iter().map(|&v| FixedPoint::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[u32] {
        &self.shape
    }

    pub fn data(&self) -> &[FixedPoint] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [FixedPoint] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Canonical encoding: shape as little-endian u32s, then raw values as
    /// little-endian i64s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.shape.len() * 4 + self.data.len() * 8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.raw().to_le_bytes());
        }
        out
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<u32>,
    data: Vec<i64>,
}

impl TryFrom<RawTensor> for FixedTensor {
    type Error = TensorShapeError;
    fn try_from(r: RawTensor) -> Result<Self, Self::Error> {
        FixedTensor::from_raw(&r.shape, &r.data)
    }
}

impl From<FixedTensor> for RawTensor {
    fn from(t: FixedTensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data.iter().map(|v| v.raw()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_bytes_layout() {
        let t = FixedTensor::from_raw(&[1, 2], &[1, -1]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[8..16], &1i64.to_le_bytes());
        assert_eq!(&b[16..], &(-1i64).to_le_bytes());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = FixedTensor::scalar(FixedPoint::ONE);
        assert!(s.shape().is_empty());
        assert_eq!(s.to_bytes(), ONE_BYTES.to_vec());
    }
    const ONE_BYTES: [u8; 8] = [0, 0, 1, 0, 0, 0, 0, 0];

    #[test]
    fn mismatched_shape_is_rejected() {
        assert!(FixedTensor::from_raw(&[2, 2], &[0; 3]).is_err());
        let bad: Result<FixedTensor, _> = serde_json::from_str(r#"{"shape":[3],"data":[1]}"#);
        assert!(bad.is_err());
    }
}
