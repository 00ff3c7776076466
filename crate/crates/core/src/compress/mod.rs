//! Model compression: post-training int8 quantization and structured
//! channel pruning.
//!
//! Activations use per-tensor affine parameters, weights per-output-channel
//! symmetric ones. Integer execution accumulates in i32 and requantizes with
//! a fixed-point multiplier, rounding half away from zero, so results are
//! bit-reproducible.

mod int8;
mod prune;
mod quant;

pub use int8::{
    activation_lut, dequantize, execute_int8, execute_int8_observed, execute_int8_timed,
    quantize_input,
};
pub use prune::{
    channel_importance, prune_channels, PruneOptions, PruneReport, PrunedLayer, SkippedLayer,
};
pub use quant::{
    affine_params, apply_multiplier, attach_requant, calibrate, dequantize_affine, quantize_affine,
    quantize_graph, quantize_multiplier, quantize_symmetric, requantize, rounding_shift,
    symmetric_scale, weight_params, Calibration, MinMax, ADD_FRAC_BITS, MIN_SCALE,
};

use crate::engine::ExecError;
use crate::ir::{GraphError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("batch norm `{0}` must be folded first")]
    UnfoldedBatchNorm(String),
    #[error("no quantization parameters for tensor {tensor} ({context})")]
    MissingParams { tensor: TensorId, context: String },
    #[error("no weight scales for `{node}` weight `{weight}`")]
    MissingWeightParams { node: String, weight: String },
    #[error("multiplier {0} is outside the supported range")]
    MultiplierRange(f64),
    #[error("prune ratio {0} is outside [0, 1)")]
    InvalidRatio(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
