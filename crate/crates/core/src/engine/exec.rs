use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::Serialize;

use super::kernels;
use super::{ExecError, TensorBuf};
use crate::ir::{DType, Graph, Node, OpKind, TensorId};

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub index: usize,
    pub name: String,
    pub kind: &'static str,
    pub outputs: Vec<TensorId>,
    pub micros: u64,
}

/// Per-node record of one execution.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ExecTrace {
    pub entries: Vec<TraceEntry>,
    /// Output buffers of every node, when requested.
    #[serde(skip)]
    pub buffers: BTreeMap<TensorId, TensorBuf>,
}

impl ExecTrace {
    pub fn total_micros(&self) -> u64 {
        self.entries.iter().map(|e| e.micros).sum()
    }
}

/// Walk `g` in node order. `eval` computes a node's outputs from its input
/// buffers; `observe` sees every node's outputs with the elapsed time.
/// Intermediate buffers are dropped after their last consumer.
pub fn walk_graph<E, O>(
    g: &Graph,
    input: TensorBuf,
    mut eval: E,
    mut observe: O,
) -> Result<BTreeMap<TensorId, TensorBuf>, ExecError>
where
    E: FnMut(&Node, &[&TensorBuf]) -> Result<Vec<TensorBuf>, ExecError>,
    O: FnMut(usize, &Node, &[TensorBuf], u64),
{
    let spec = g.input_spec();
    if input.spec.dtype != spec.dtype {
        return Err(ExecError::DType {
            tensor: spec.id,
            expected: spec.dtype,
            found: input.spec.dtype,
        });
    }
    if input.shape() != spec.shape {
        return Err(ExecError::Shape {
            tensor: spec.id,
            expected: spec.shape,
            found: input.shape(),
        });
    }
    let consumers = g.consumers();
    let mut remaining: HashMap<TensorId, usize> =
        consumers.iter().map(|(t, c)| (*t, c.len())).collect();
    let mut live: HashMap<TensorId, TensorBuf> = HashMap::new();
    live.insert(spec.id, input.with_id(spec.id));
    let mut outputs = BTreeMap::new();

    for (i, node) in g.nodes.iter().enumerate() {
        let start = Instant::now();
        let produced = {
            let ins = node
                .inputs
                .iter()
                .map(|t| live.get(t).ok_or(crate::ir::GraphError::UnknownTensor(*t)))
                .collect::<Result<Vec<_>, _>>()?;
            eval(node, &ins)?
        };
        let micros = start.elapsed().as_micros() as u64;
        if produced.len() != node.outputs.len() {
            return Err(ExecError::Node {
                node: node.name.clone(),
                msg: format!(
                    "produced {} tensors, expected {}",
                    produced.len(),
                    node.outputs.len()
                ),
            });
        }
        let produced: Vec<TensorBuf> = produced
            .into_iter()
            .zip(&node.outputs)
            .map(|(b, &id)| {
                let mut b = b.with_id(id);
                b.spec.quant = g.tensors[&id].quant.clone();
                b
            })
            .collect();
        observe(i, node, &produced, micros);
        for t in &node.inputs {
            if let Some(r) = remaining.get_mut(t) {
                *r -= 1;
                if *r == 0 && !g.output_ids.contains(t) {
                    live.remove(t);
                }
            }
        }
        for b in produced {
            if g.output_ids.contains(&b.id()) {
                outputs.insert(b.id(), b.clone());
            }
            live.insert(b.id(), b);
        }
    }
    for &t in &g.output_ids {
        if let (false, Some(b)) = (outputs.contains_key(&t), live.get(&t)) {
            outputs.insert(t, b.clone());
        }
    }
    Ok(outputs)
}

fn float_conv(
    node: &Node,
    x: &TensorBuf,
    kernel: &str,
    bias: &str,
    stride: usize,
    pad: usize,
) -> Result<TensorBuf, ExecError> {
    kernels::conv2d_ref(x, node.weight(kernel)?, node.weights.get(bias), stride, pad)
}

fn map_f32(x: &TensorBuf, f: impl Fn(f32) -> f32) -> Result<TensorBuf, ExecError> {
    Ok(TensorBuf::f32(
        x.shape(),
        x.as_f32()?.iter().map(|&v| f(v)).collect(),
    ))
}

fn batch_norm(node: &Node, x: &TensorBuf, eps: f32) -> Result<TensorBuf, ExecError> {
    let get = |n: &str| -> Result<&[f32], ExecError> {
        node.weight(n)?
            .data
            .as_f32()
            .ok_or_else(|| ExecError::Kernel(format!("batch norm `{n}` must be f32")))
    };
    let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("mean")?, get("var")?);
    let (c, h, w) = x.chw();
    let data = x.as_f32()?;
    let mut out = Vec::with_capacity(data.len());
    for ch in 0..c {
        let inv = gamma[ch] / (var[ch] + eps).sqrt();
        out.extend(
            data[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|v| (v - mean[ch]) * inv + beta[ch]),
        );
    }
    Ok(TensorBuf::f32(x.shape(), out))
}

/// Evaluate one node in float.
pub(crate) fn eval_float(node: &Node, ins: &[&TensorBuf]) -> Result<Vec<TensorBuf>, ExecError> {
    let one = |v: TensorBuf| Ok(vec![v]);
    match &node.op {
        OpKind::Conv2d(a) => one(float_conv(
            node, ins[0], "kernel", "bias", a.stride, a.padding,
        )?),
        OpKind::BatchNorm { eps } => one(batch_norm(node, ins[0], *eps)?),
        OpKind::SiLU => one(map_f32(ins[0], kernels::silu)?),
        OpKind::Sigmoid => one(map_f32(ins[0], kernels::sigmoid)?),
        OpKind::MaxPool2d(p) => one(kernels::maxpool2d_ref(
            ins[0], p.kernel, p.stride, p.padding,
        )?),
        OpKind::UpsampleNearest2x => one(kernels::upsample_nearest2x(ins[0])?),
        OpKind::ConcatChannels => one(kernels::concat_channels(ins)?),
        OpKind::Add => one(kernels::add(ins[0], ins[1])?),
        OpKind::Detect(_) => node
            .conv_branches()
            .iter()
            .zip(ins)
            .map(|((k, b), x)| float_conv(node, x, k, b, 1, 0))
            .collect(),
    }
}

/// Run `g` in float and return its outputs keyed by tensor id.
pub fn execute_float(
    g: &Graph,
    input: &TensorBuf,
) -> Result<BTreeMap<TensorId, TensorBuf>, ExecError> {
    walk_graph(g, input.clone(), eval_float, |_, _, _, _| {})
}

/// Like [`execute_float`], calling `observe` with every produced tensor
/// (the graph input included).
pub fn execute_float_observed(
    g: &Graph,
    input: &TensorBuf,
    mut observe: impl FnMut(&TensorBuf),
) -> Result<BTreeMap<TensorId, TensorBuf>, ExecError> {
    if input.spec.dtype == DType::F32 {
        observe(&input.clone().with_id(g.input_id));
    }
    walk_graph(g, input.clone(), eval_float, |_, _, outs, _| {
        outs.iter().for_each(&mut observe)
    })
}

/// Run `g` in float, recording per-node timing and optionally every
/// intermediate buffer.
pub fn execute_float_traced(
    g: &Graph,
    input: &TensorBuf,
    keep_buffers: bool,
) -> Result<(BTreeMap<TensorId, TensorBuf>, ExecTrace), ExecError> {
    let mut trace = ExecTrace::default();
    let out = walk_graph(g, input.clone(), eval_float, |i, node, outs, micros| {
        trace.entries.push(TraceEntry {
            index: i,
            name: node.name.clone(),
            kind: node.op.name(),
            outputs: node.outputs.clone(),
            micros,
        });
        if keep_buffers {
            for b in outs {
                trace.buffers.insert(b.id(), b.clone());
            }
        }
    })?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_yolov5n, ConvAttrs, GraphBuilder, Metadata, Region, Weight, YoloConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silu_of_zeros() {
        let mut b = GraphBuilder::new([1, 2, 3, 3]);
        let x = b.input();
        let y = b.silu("act", x, Region::Backbone).unwrap();
        let g = b.finish(vec![y], Metadata::default()).unwrap();
        let out = execute_float(&g, &TensorBuf::zeros_f32([1, 2, 3, 3])).unwrap();
        assert!(out[&y].as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_conv() {
        let mut b = GraphBuilder::new([1, 1, 4, 4]);
        let x = b.input();
        let y = b
            .conv2d(
                "c",
                x,
                ConvAttrs {
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                [1, 1, 1, 1],
                vec![1.0],
                Some(vec![0.0]),
                Region::Backbone,
            )
            .unwrap();
        let g = b.finish(vec![y], Metadata::default()).unwrap();
        let input = TensorBuf::f32(
            [1, 1, 4, 4],
            (0..16).map(|v| v as f32 * 0.37 - 2.0).collect(),
        );
        let out = execute_float(&g, &input).unwrap();
        assert_eq!(out[&y].as_f32().unwrap(), input.as_f32().unwrap());
    }

    #[test]
    fn conv_silu_composes_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernel: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b = GraphBuilder::new([1, 3, 7, 7]);
        let x = b.input();
        let c = b
            .conv2d(
                "c",
                x,
                ConvAttrs {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                [4, 3, 3, 3],
                kernel.clone(),
                Some(bias.clone()),
                Region::Backbone,
            )
            .unwrap();
        let y = b.silu("act", c, Region::Backbone).unwrap();
        let g = b.finish(vec![y], Metadata::default()).unwrap();
        let input = TensorBuf::f32(
            [1, 3, 7, 7],
            (0..147).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );

        let expected = kernels::conv2d_ref(
            &input,
            &Weight::f32(vec![4, 3, 3, 3], kernel),
            Some(&Weight::f32(vec![4], bias)),
            2,
            1,
        )
        .unwrap();
        let expected: Vec<f32> = expected
            .as_f32()
            .unwrap()
            .iter()
            .map(|&v| kernels::silu(v))
            .collect();
        let out = execute_float(&g, &input).unwrap();
        assert_eq!(out[&y].as_f32().unwrap(), expected.as_slice());
    }

    #[test]
    fn rejects_wrong_input() {
        let g = build_yolov5n(&YoloConfig::new(2, 192)).unwrap();
        let err = execute_float(&g, &TensorBuf::zeros_f32([1, 3, 64, 64])).unwrap_err();
        assert!(matches!(err, ExecError::Shape { tensor: 0, .. }));
        let err = execute_float(&g, &TensorBuf::i8([1, 3, 192, 192], vec![0; 3 * 192 * 192]))
            .unwrap_err();
        assert!(matches!(err, ExecError::DType { tensor: 0, .. }));
    }

    #[test]
    fn yolo_forward_is_finite_and_deterministic() {
        let g = build_yolov5n(&YoloConfig::new(2, 192)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = TensorBuf::f32(
            [1, 3, 192, 192],
            (0..3 * 192 * 192)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        );
        let (a, trace) = execute_float_traced(&g, &input, false).unwrap();
        let b = execute_float(&g, &input).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace.entries.len(), g.nodes.len());
        assert_eq!(a.len(), 3);
        for t in a.values() {
            assert!(t.as_f32().unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
