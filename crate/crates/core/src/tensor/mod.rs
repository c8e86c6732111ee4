//! Dense row-major tensors and a reverse-mode autodiff tape.

pub(crate) mod kernels;
mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::half;

pub use kernels::{broadcast_shape, gemm, pow_scalar};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dtype mismatch in {op}: {lhs} vs {rhs} (insert an explicit cast)")]
    DtypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
    #[error("no op kind `{0}` in the autocast safety table")]
    UnknownOpKind(String),
}

/// Element type tag. `F16` tensors keep f32 storage but only ever hold
/// values exactly representable in binary16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "fp32" => Ok(DType::F32),
            "f16" | "fp16" => Ok(DType::F16),
            _ => Err(format!("unknown dtype `{s}`")),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// An FP32 tensor. An empty shape is a scalar.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyExtent(shape.to_vec()));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: DType::F32,
            data,
        })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor {
            shape: Vec::new(),
            dtype: DType::F32,
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::from_vec(shape, vec![v; numel(shape)]).expect("shape with zero extent")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub(crate) fn raw(shape: Vec<usize>, dtype: DType, mut data: Vec<f32>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        if dtype == DType::F16 {
            half::round_slice(&mut data);
        }
        Tensor { shape, dtype, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element-wise conversion; F16 targets round through binary16.
    pub fn cast(&self, dtype: DType) -> Tensor {
        Tensor::raw(self.shape.clone(), dtype, self.data.clone())
    }

    /// Mutate the buffer in place. F16 tensors are re-rounded afterwards so
    /// the representability invariant holds.
    pub fn update<F: FnOnce(&mut [f32])>(&mut self, f: F) {
        f(&mut self.data);
        if self.dtype == DType::F16 {
            half::round_slice(&mut self.data);
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
