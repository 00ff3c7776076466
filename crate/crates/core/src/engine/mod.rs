//! Reference execution in 32-bit float.
//!
//! The float path is the correctness oracle for everything downstream: BN
//! folding, pruning and int8 execution are all checked against it. Layout is
//! NCHW with a batch of one; accumulation is plain f32 in a fixed order
//! (bias, then input channel, kernel row, kernel column), so results are
//! bit-reproducible.

mod exec;
pub mod kernels;
mod synth;
mod tensor;

pub(crate) use exec::eval_float;
pub use exec::{
    execute_float, execute_float_observed, execute_float_traced, walk_graph, ExecTrace, TraceEntry,
};
pub use kernels::{
    add, concat_channels, conv2d_ref, maxpool2d_ref, sigmoid, silu, upsample_nearest2x,
};
pub use synth::synthetic_scene;
pub use tensor::{TensorBuf, TensorData};

use crate::ir::{DType, GraphError, Shape, TensorId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExecError {
    #[error("tensor {tensor}: expected dtype {expected:?}, found {found:?}")]
    DType {
        tensor: TensorId,
        expected: DType,
        found: DType,
    },
    #[error("tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    Shape {
        tensor: TensorId,
        expected: Shape,
        found: Shape,
    },
    #[error("kernel error: {0}")]
    Kernel(String),
    #[error("node `{0}` has no requantization multiplier")]
    MissingRequant(String),
    #[error("node `{node}`: {msg}")]
    Node { node: String, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}
