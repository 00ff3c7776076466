//! Model graph representation.
//!
//! A [`Graph`] is a topologically ordered list of [`Node`]s over a table of
//! [`TensorSpec`]s. Every stage of the toolchain (building, BN folding,
//! pruning, quantization, planning) consumes a graph and returns a new one;
//! graphs are never mutated in place once handed out.

mod build;
pub mod container;
mod count;
mod fold;
mod shape;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use build::{build_yolov5n, make_divisible, GraphBuilder, YoloConfig, DEFAULT_SEED};
pub use count::{count_macs, count_params, node_macs, node_params};
pub use fold::fold_batchnorm;
pub use shape::{conv_out_dim, infer_shapes, node_output_shapes};

pub type TensorId = u32;

/// NCHW shape.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("input size {0} is not divisible by 32 (the coarsest head stride)")]
    InputSizeNotDivisible(usize),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("node `{node}`: shape mismatch: {msg}")]
    ShapeMismatch { node: String, msg: String },
    #[error("node `{node}`: {msg}")]
    InvalidNode { node: String, msg: String },
    #[error("tensor {0} is referenced but not declared")]
    UnknownTensor(TensorId),
    #[error("node `{node}` reads tensor {tensor} before it is produced")]
    NotTopological { node: String, tensor: TensorId },
    #[error("tensor {0} is produced more than once")]
    MultipleProducers(TensorId),
    #[error("tensor {0} has no inferred shape")]
    MissingShape(TensorId),
    #[error("batch norm `{0}` does not directly follow a convolution")]
    DanglingBatchNorm(String),
    #[error("graph must have exactly {expected} outputs, found {found}")]
    OutputCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

/// Quantization parameters attached to a tensor or a weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum QuantParams {
    /// `real = scale * (q - zero_point)`
    PerTensorAffine { scale: f32, zero_point: i8 },
    /// `real[c] = scales[c] * q`, one scale per output channel.
    PerChannelSymmetric { scales: Vec<f32> },
}

impl QuantParams {
    /// Scale and zero point of a per-tensor record.
    pub fn affine(&self) -> Option<(f32, i8)> {
        match self {
            QuantParams::PerTensorAffine { scale, zero_point } => Some((*scale, *zero_point)),
            QuantParams::PerChannelSymmetric { .. } => None,
        }
    }

    pub fn channel_scales(&self) -> Option<&[f32]> {
        match self {
            QuantParams::PerChannelSymmetric { scales } => Some(scales),
            QuantParams::PerTensorAffine { .. } => None,
        }
    }
}

/// Fixed-point multiplier: `real ≈ mantissa * 2^-right_shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantMultiplier {
    pub mantissa: i32,
    pub right_shift: u32,
}

impl RequantMultiplier {
    pub fn as_f64(self) -> f64 {
        self.mantissa as f64 * (-(self.right_shift as f64)).exp2()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub id: TensorId,
    pub dtype: DType,
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Backbone,
    Neck,
    Head,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::Backbone => "backbone",
            Region::Neck => "neck",
            Region::Head => "head",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Detection head: one 1x1 convolution per stride, producing raw
/// `3 * (5 + num_classes)` channel maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectAttrs {
    pub num_classes: usize,
    pub strides: Vec<usize>,
    /// Per stride, three (width, height) anchors in input pixels.
    pub anchors: Vec<[[f32; 2]; 3]>,
}

impl DetectAttrs {
    pub fn channels_per_head(&self) -> usize {
        3 * (5 + self.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum OpKind {
    Conv2d(ConvAttrs),
    BatchNorm { eps: f32 },
    SiLU,
    Sigmoid,
    MaxPool2d(PoolAttrs),
    UpsampleNearest2x,
    ConcatChannels,
    Add,
    Detect(DetectAttrs),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d(_) => "Conv2d",
            OpKind::BatchNorm { .. } => "BatchNorm",
            OpKind::SiLU => "SiLU",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::MaxPool2d(_) => "MaxPool2d",
            OpKind::UpsampleNearest2x => "UpsampleNearest2x",
            OpKind::ConcatChannels => "ConcatChannels",
            OpKind::Add => "Add",
            OpKind::Detect(_) => "Detect",
        }
    }

    /// Ops that act on each channel independently, so a channel subset of
    /// the input maps onto the same subset of the output.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            OpKind::BatchNorm { .. }
                | OpKind::SiLU
                | OpKind::Sigmoid
                | OpKind::MaxPool2d(_)
                | OpKind::UpsampleNearest2x
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl WeightData {
    pub fn len(&self) -> usize {
        match self {
            WeightData::F32(v) => v.len(),
            WeightData::I8(v) => v.len(),
            WeightData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            WeightData::F32(_) => DType::F32,
            WeightData::I8(_) => DType::I8,
            WeightData::I32(_) => DType::I32,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            WeightData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match self {
            WeightData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match self {
            WeightData::I32(v) => Some(v),
            _ => None,
        }
    }
}

/// Named constant tensor owned by a node (kernel, bias, BN statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    pub shape: Vec<usize>,
    pub data: WeightData,
    pub quant: Option<QuantParams>,
}

impl Weight {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Weight {
            shape,
            data: WeightData::F32(data),
            quant: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.data.dtype().size_bytes()
    }
}

/// Weight names used by the op kinds.
pub mod wname {
    pub const KERNEL: &str = "kernel";
    pub const BIAS: &str = "bias";
    pub const GAMMA: &str = "gamma";
    pub const BETA: &str = "beta";
    pub const MEAN: &str = "mean";
    pub const VAR: &str = "var";

    /// Kernel of detection branch `i`.
    pub fn detect_kernel(i: usize) -> String {
        format!("kernel.{i}")
    }

    pub fn detect_bias(i: usize) -> String {
        format!("bias.{i}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub region: Region,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub weights: BTreeMap<String, Weight>,
    /// Per-branch, per-output-channel requantization multipliers; filled in
    /// by quantization for Conv2d (one branch) and Detect (one per head).
    pub requant: Vec<Vec<RequantMultiplier>>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: OpKind, region: Region) -> Self {
        Node {
            name: name.into(),
            op,
            region,
            inputs: Vec::new(),
            outputs: Vec::new(),
            weights: BTreeMap::new(),
            requant: Vec::new(),
        }
    }

    pub fn weight(&self, name: &str) -> Result<&Weight, GraphError> {
        self.weights
            .get(name)
            .ok_or_else(|| GraphError::InvalidNode {
                node: self.name.clone(),
                msg: format!("missing weight `{name}`"),
            })
    }

    /// (kernel, bias) weight names for each convolution branch of the node.
    pub fn conv_branches(&self) -> Vec<(String, String)> {
        match &self.op {
            OpKind::Conv2d(_) => vec![(wname::KERNEL.to_string(), wname::BIAS.to_string())],
            OpKind::Detect(d) => (0..d.strides.len())
                .map(|i| (wname::detect_kernel(i), wname::detect_bias(i)))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub num_classes: usize,
    pub input_size: usize,
    pub width_mult: f32,
    pub depth_mult: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<TensorId, TensorSpec>,
    pub input_id: TensorId,
    pub output_ids: Vec<TensorId>,
    pub metadata: Metadata,
}

impl Graph {
    /// A graph with an input tensor and no nodes.
    pub fn empty(input_shape: Shape) -> Self {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            0,
            TensorSpec {
                id: 0,
                dtype: DType::F32,
                shape: input_shape,
                quant: None,
            },
        );
        Graph {
            nodes: Vec::new(),
            tensors,
            input_id: 0,
            output_ids: Vec::new(),
            metadata: Metadata::default(),
        }
    }

    pub fn tensor(&self, id: TensorId) -> Result<&TensorSpec, GraphError> {
        self.tensors.get(&id).ok_or(GraphError::UnknownTensor(id))
    }

    pub fn input_spec(&self) -> &TensorSpec {
        &self.tensors[&self.input_id]
    }

    pub fn is_quantized(&self) -> bool {
        self.input_spec().dtype == DType::I8
    }

    /// Index of the node producing each tensor.
    pub fn producers(&self) -> HashMap<TensorId, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &t in &n.outputs {
                map.insert(t, i);
            }
        }
        map
    }

    /// Indices of the nodes reading each tensor, in topological order.
    pub fn consumers(&self) -> HashMap<TensorId, Vec<usize>> {
        let mut map: HashMap<TensorId, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &t in &n.inputs {
                let e = map.entry(t).or_default();
                if e.last() != Some(&i) {
                    e.push(i);
                }
            }
        }
        map
    }

    pub fn node_by_name(&self, name: &str) -> Option<(usize, &Node)> {
        self.nodes.iter().enumerate().find(|(_, n)| n.name == name)
    }

    /// Structural validation: declared tensors, single producers,
    /// topological order and at least one output.
    pub fn validate(&self) -> Result<(), GraphError> {
        self.tensor(self.input_id)?;
        let mut available: BTreeSet<TensorId> = BTreeSet::new();
        available.insert(self.input_id);
        for n in &self.nodes {
            for &t in &n.inputs {
                self.tensor(t)?;
                if !available.contains(&t) {
                    return Err(GraphError::NotTopological {
                        node: n.name.clone(),
                        tensor: t,
                    });
                }
            }
            for &t in &n.outputs {
                self.tensor(t)?;
                if !available.insert(t) {
                    return Err(GraphError::MultipleProducers(t));
                }
            }
        }
        for &t in &self.output_ids {
            self.tensor(t)?;
            if !available.contains(&t) {
                return Err(GraphError::UnknownTensor(t));
            }
        }
        if self.output_ids.is_empty() && !self.nodes.is_empty() {
            return Err(GraphError::OutputCount {
                expected: 1,
                found: 0,
            });
        }
        Ok(())
    }

    /// Validation for detector graphs: structural checks plus exactly three
    /// raw head outputs and N == 1 activations.
    pub fn validate_detector(&self) -> Result<(), GraphError> {
        self.validate()?;
        if self.output_ids.len() != 3 {
            return Err(GraphError::OutputCount {
                expected: 3,
                found: self.output_ids.len(),
            });
        }
        for t in self.tensors.values() {
            if t.shape[0] != 1 {
                return Err(GraphError::InvalidConfig(format!(
                    "tensor {} has batch {}, expected 1",
                    t.id, t.shape[0]
                )));
            }
        }
        Ok(())
    }

    /// The Detect node, if the graph has one.
    pub fn detect_attrs(&self) -> Option<&DetectAttrs> {
        self.nodes.iter().find_map(|n| match &n.op {
            OpKind::Detect(d) => Some(d),
            _ => None,
        })
    }

    pub fn next_tensor_id(&self) -> TensorId {
        self.tensors.keys().next_back().map_or(0, |k| k + 1)
    }
}
