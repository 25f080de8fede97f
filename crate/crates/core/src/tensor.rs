//! Tensor specs and concrete tensor values.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dtype::{DTypeLabel, Storage};

/// Declared type of a tensor edge: datatype label plus shape (index 0 is
/// the batch dimension).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dtype: DTypeLabel,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(dtype: DTypeLabel, shape: impl Into<Vec<usize>>) -> Self {
        TensorSpec {
            dtype,
            shape: shape.into(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn storage(&self) -> Storage {
        self.dtype.storage()
    }

    pub fn has_empty_extent(&self) -> bool {
        self.shape.contains(&0)
    }

    /// Shape string used as the shape-coverage bucket, e.g. `2x8x8x3`.
    pub fn shape_key(&self) -> String {
        shape_key(&self.shape)
    }

    pub fn with_dtype(&self, dtype: DTypeLabel) -> Self {
        TensorSpec {
            dtype,
            shape: self.shape.clone(),
        }
    }

    pub fn with_shape(&self, shape: Vec<usize>) -> Self {
        TensorSpec {
            dtype: self.dtype,
            shape,
        }
    }
}

pub fn shape_key(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.dtype, self.shape)
    }
}

/// Row-major payload. Elements are held widened to `f64` but every element
/// is exactly representable in the dtype's storage format.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTensor {
    pub spec: TensorSpec,
    pub data: Vec<f64>,
}

impl ValueTensor {
    /// Builds a tensor, rounding every element to the dtype's storage.
    pub fn new(spec: TensorSpec, data: Vec<f64>) -> Self {
        assert_eq!(spec.numel(), data.len(), "payload length mismatch for {spec}");
        let storage = spec.storage();
        let data = if storage == Storage::F64 {
            data
        } else {
            data.into_iter().map(|v| storage.round(v)).collect()
        };
        ValueTensor { spec, data }
    }

    pub fn filled(spec: TensorSpec, value: f64) -> Self {
        let n = spec.numel();
        Self::new(spec, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.spec.shape
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, treating NaN payloads as equal to themselves.
    pub fn bitwise_eq(&self, other: &ValueTensor) -> bool {
        self.spec == other.spec
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
