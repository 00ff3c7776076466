use serde::{Deserialize, Serialize};

use super::ExecError;
use crate::ir::{numel, DType, Shape, TensorId, TensorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// A concrete NCHW tensor. `data.len()` always equals the shape product.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf {
    pub spec: TensorSpec,
    pub data: TensorData,
}

impl TensorBuf {
    fn new(id: TensorId, shape: Shape, data: TensorData) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "data length does not match shape {shape:?}"
        );
        TensorBuf {
            spec: TensorSpec {
                id,
                dtype: data.dtype(),
                shape,
                quant: None,
            },
            data,
        }
    }

    pub fn f32(shape: Shape, data: Vec<f32>) -> Self {
        Self::new(0, shape, TensorData::F32(data))
    }

    pub fn i8(shape: Shape, data: Vec<i8>) -> Self {
        Self::new(0, shape, TensorData::I8(data))
    }

    pub fn zeros_f32(shape: Shape) -> Self {
        Self::f32(shape, vec![0.0; numel(&shape)])
    }

    pub fn with_id(mut self, id: TensorId) -> Self {
        self.spec.id = id;
        self
    }

    pub fn id(&self) -> TensorId {
        self.spec.id
    }

    pub fn shape(&self) -> Shape {
        self.spec.shape
    }

    /// (C, H, W) of a batch-one tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.spec.shape;
        (c, h, w)
    }

    pub fn as_f32(&self) -> Result<&[f32], ExecError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            d => Err(ExecError::DType {
                tensor: self.id(),
                expected: DType::F32,
                found: d.dtype(),
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8], ExecError> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            d => Err(ExecError::DType {
                tensor: self.id(),
                expected: DType::I8,
                found: d.dtype(),
            }),
        }
    }
}
