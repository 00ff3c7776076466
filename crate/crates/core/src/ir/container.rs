//! `.edm` model container.
//!
//! Layout:
//!
//! ```text
//! 0..4    magic "EDM1"
//! 4..8    header length, u32 little-endian
//! 8..     header, UTF-8 JSON
//! ...     zero padding to a 16-byte boundary
//! ...     weight blobs, each starting 16-byte aligned
//! ```
//!
//! Blob offsets in the header are relative to the start of the blob
//! section. Kernels are stored row-major `(C_out, C_in, k, k)`, every
//! element little-endian. Per-channel weight scales are stored as f32 blobs
//! next to the weight they describe. Requantization multipliers of a
//! quantized model are not stored; they are recomputed from the scales on
//! load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    DType, Graph, Metadata, Node, OpKind, QuantParams, Region, Shape, TensorId, TensorSpec, Weight,
    WeightData,
};

pub const MAGIC: &[u8; 4] = b"EDM1";
pub const ALIGN: usize = 16;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("invalid model: {0}")]
    Graph(#[from] super::GraphError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(offset: usize, msg: impl Into<String>) -> ContainerError {
    ContainerError::Parse {
        offset,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    id: TensorId,
    dtype: DType,
    shape: Shape,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    dtype: DType,
    shape: Vec<usize>,
    blob: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scales: Option<BlobRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeHeader {
    name: String,
    op: OpKind,
    region: Region,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    weights: BTreeMap<String, WeightHeader>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct QuantSection {
    activations: BTreeMap<TensorId, QuantParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    metadata: Metadata,
    input: TensorId,
    outputs: Vec<TensorId>,
    tensors: Vec<TensorHeader>,
    nodes: Vec<NodeHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantSection>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

struct BlobWriter {
    data: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, bytes: Vec<u8>) -> BlobRef {
        let offset = align_up(self.data.len());
        self.data.resize(offset, 0);
        let len = bytes.len();
        self.data.extend(bytes);
        BlobRef { offset, len }
    }
}

fn weight_bytes(data: &WeightData) -> Vec<u8> {
    match data {
        WeightData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        WeightData::I8(v) => v.iter().map(|x| *x as u8).collect(),
        WeightData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn build_header(g: &Graph, blobs: &mut BlobWriter) -> Header {
    let quantized = g.tensors.values().any(|t| t.quant.is_some());
    let mut quant = QuantSection::default();
    let tensors = g
        .tensors
        .values()
        .map(|t| {
            if let Some(q) = &t.quant {
                quant.activations.insert(t.id, q.clone());
            }
            TensorHeader {
                id: t.id,
                dtype: t.dtype,
                shape: t.shape,
            }
        })
        .collect();
    let nodes = g
        .nodes
        .iter()
        .map(|n| {
            let weights = n
                .weights
                .iter()
                .map(|(name, w)| {
                    let blob = blobs.push(weight_bytes(&w.data));
                    let scales = w
                        .quant
                        .as_ref()
                        .and_then(QuantParams::channel_scales)
                        .map(|s| blobs.push(f32_bytes(s)));
                    (
                        name.clone(),
                        WeightHeader {
                            dtype: w.data.dtype(),
                            shape: w.shape.clone(),
                            blob,
                            scales,
                        },
                    )
                })
                .collect();
            NodeHeader {
                name: n.name.clone(),
                op: n.op.clone(),
                region: n.region,
                inputs: n.inputs.clone(),
                outputs: n.outputs.clone(),
                weights,
            }
        })
        .collect();
    Header {
        format: "edm".into(),
        version: FORMAT_VERSION,
        metadata: g.metadata.clone(),
        input: g.input_id,
        outputs: g.output_ids.clone(),
        tensors,
        nodes,
        quant: quantized.then_some(quant),
    }
}

fn header_json(g: &Graph) -> (Vec<u8>, Vec<u8>) {
    let mut blobs = BlobWriter { data: Vec::new() };
    let header = build_header(g, &mut blobs);
    let json = serde_json::to_vec(&header).expect("header is plain data");
    (json, blobs.data)
}

/// Bytes taken by the magic, the length word and the JSON header.
pub fn header_size(g: &Graph) -> usize {
    8 + header_json(g).0.len()
}

pub fn encode(g: &Graph) -> Vec<u8> {
    let (json, blobs) = header_json(g);
    let mut out = Vec::with_capacity(align_up(8 + json.len()) + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&blobs);
    out
}

fn read_blob(data: &[u8], base: usize, r: BlobRef) -> Result<&[u8], ContainerError> {
    let start = base + r.offset;
    if !r.offset.is_multiple_of(ALIGN) {
        return Err(parse_err(start, "blob is not 16-byte aligned"));
    }
    data.get(start..start + r.len).ok_or_else(|| {
        parse_err(
            start,
            format!("blob of {} bytes runs past end of file", r.len),
        )
    })
}

fn decode_weight(
    bytes: &[u8],
    dtype: DType,
    at: usize,
    expected: usize,
) -> Result<WeightData, ContainerError> {
    if bytes.len() != expected * dtype.size_bytes() {
        return Err(parse_err(
            at,
            format!(
                "blob holds {} bytes, shape needs {expected} {dtype:?}",
                bytes.len()
            ),
        ));
    }
    Ok(match dtype {
        DType::F32 => WeightData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I8 => WeightData::I8(bytes.iter().map(|b| *b as i8).collect()),
        DType::I32 => WeightData::I32(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    })
}

pub fn decode(data: &[u8]) -> Result<Graph, ContainerError> {
    if data.len() < 4 || &data[..4] != MAGIC {
        return Err(parse_err(0, "bad magic, expected `EDM1`"));
    }
    let len_bytes = data
        .get(4..8)
        .ok_or_else(|| parse_err(4, "truncated header length"))?;
    let hlen = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let json = data
        .get(8..8 + hlen)
        .ok_or_else(|| parse_err(8, format!("header of {hlen} bytes is truncated")))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| {
        // serde_json reports line/column; the header is a single line.
        parse_err(8 + e.column().saturating_sub(1), format!("header: {e}"))
    })?;
    if header.format != "edm" || header.version != FORMAT_VERSION {
        return Err(parse_err(8, "unsupported header format/version"));
    }
    let base = align_up(8 + hlen);
    let quant = header.quant.unwrap_or_default();

    let mut tensors = BTreeMap::new();
    for t in header.tensors {
        tensors.insert(
            t.id,
            TensorSpec {
                id: t.id,
                dtype: t.dtype,
                shape: t.shape,
                quant: quant.activations.get(&t.id).cloned(),
            },
        );
    }
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for nh in header.nodes {
        let mut node = Node::new(nh.name, nh.op, nh.region);
        node.inputs = nh.inputs;
        node.outputs = nh.outputs;
        for (wn, wh) in nh.weights {
            let at = base + wh.blob.offset;
            let numel = wh.shape.iter().product();
            let values = decode_weight(read_blob(data, base, wh.blob)?, wh.dtype, at, numel)?;
            let quant = match wh.scales {
                Some(r) => {
                    let bytes = read_blob(data, base, r)?;
                    if bytes.len() != wh.shape.first().copied().unwrap_or(0) * 4 {
                        return Err(parse_err(
                            base + r.offset,
                            "scale blob does not match C_out",
                        ));
                    }
                    Some(QuantParams::PerChannelSymmetric {
                        scales: bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    })
                }
                None => None,
            };
            node.weights.insert(
                wn,
                Weight {
                    shape: wh.shape,
                    data: values,
                    quant,
                },
            );
        }
        nodes.push(node);
    }
    let mut g = Graph {
        nodes,
        tensors,
        input_id: header.input,
        output_ids: header.outputs,
        metadata: header.metadata,
    };
    g.validate()?;
    if !quant.activations.is_empty() {
        crate::compress::attach_requant(&mut g)
            .map_err(|e| parse_err(8, format!("quantization parameters: {e}")))?;
    }
    Ok(g)
}

pub fn save(g: &Graph, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    std::fs::write(path, encode(g))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Graph, ContainerError> {
    decode(&std::fs::read(path)?)
}
