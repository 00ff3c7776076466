//! Integer-only reference execution of a quantized graph.

use std::collections::BTreeMap;

use super::quant::{
    apply_multiplier, dequantize_affine, quantize_affine, requantize, rounding_shift, ADD_FRAC_BITS,
};
use crate::engine::kernels::{
    conv_accumulate, maxpool_plane, sigmoid, silu, upsample_plane, ConvGeom,
};
use crate::engine::{walk_graph, ExecError, TensorBuf};
use crate::ir::{Graph, Node, OpKind, QuantParams, RequantMultiplier, TensorId, TensorSpec};

fn affine(spec: &TensorSpec) -> Result<(f32, i8), ExecError> {
    spec.quant
        .as_ref()
        .and_then(QuantParams::affine)
        .ok_or_else(|| ExecError::Kernel(format!("tensor {} has no affine parameters", spec.id)))
}

/// Quantize a float tensor onto the grid of the graph input.
pub fn quantize_input(g: &Graph, x: &TensorBuf) -> Result<TensorBuf, ExecError> {
    let spec = g.input_spec();
    let (s, zp) = affine(spec)?;
    let data = x
        .as_f32()?
        .iter()
        .map(|&v| quantize_affine(v, s, zp))
        .collect();
    let mut out = TensorBuf::i8(x.shape(), data).with_id(spec.id);
    out.spec.quant = spec.quant.clone();
    Ok(out)
}

/// Float view of an int8 tensor carrying affine parameters.
pub fn dequantize(x: &TensorBuf) -> Result<TensorBuf, ExecError> {
    let (s, zp) = affine(&x.spec)?;
    let data = x
        .as_i8()?
        .iter()
        .map(|&q| dequantize_affine(q, s, zp))
        .collect();
    Ok(TensorBuf::f32(x.shape(), data).with_id(x.id()))
}

/// 256-entry table of `f` evaluated on the input grid and requantized onto
/// the output grid.
pub fn activation_lut(f: impl Fn(f32) -> f32, input: (f32, i8), output: (f32, i8)) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        let q = i as i32 - 128;
        let x = dequantize_affine(q as i8, input.0, input.1);
        *slot = quantize_affine(f(x), output.0, output.1);
    }
    lut
}

fn requant_for(node: &Node, branch: usize) -> Result<&[RequantMultiplier], ExecError> {
    node.requant
        .get(branch)
        .map(Vec::as_slice)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| ExecError::MissingRequant(node.name.clone()))
}

#[allow(clippy::too_many_arguments)]
fn conv_int8(
    node: &Node,
    x: &TensorBuf,
    out_spec: &TensorSpec,
    kernel: &str,
    bias: &str,
    mults: &[RequantMultiplier],
    stride: usize,
    pad: usize,
) -> Result<TensorBuf, ExecError> {
    let (_, zp_in) = affine(&x.spec)?;
    let (_, zp_out) = affine(out_spec)?;
    let k = node.weight(kernel)?;
    let kq = k
        .data
        .as_i8()
        .ok_or_else(|| ExecError::Kernel(format!("`{}`: kernel is not int8", node.name)))?;
    let [c_out, c_in, kk, _] = <[usize; 4]>::try_from(k.shape.as_slice())
        .map_err(|_| ExecError::Kernel("kernel must be 4-D".into()))?;
    let chw = x.chw();
    if c_in != chw.0 || mults.len() != c_out {
        return Err(ExecError::Node {
            node: node.name.clone(),
            msg: format!(
                "kernel {:?} or multipliers do not match input {:?}",
                k.shape,
                x.shape()
            ),
        });
    }
    let geom = ConvGeom::new(chw, c_out, kk, stride, pad)?;
    let plane = geom.oh * geom.ow;
    let input: Vec<i32> = x
        .as_i8()?
        .iter()
        .map(|&q| q as i32 - zp_in as i32)
        .collect();
    let kernel: Vec<i32> = kq.iter().map(|&w| w as i32).collect();
    let mut acc = vec![0i32; c_out * plane];
    if let Some(b) = node.weights.get(bias) {
        let b = b
            .data
            .as_i32()
            .ok_or_else(|| ExecError::Kernel(format!("`{}`: bias is not int32", node.name)))?;
        for (o, &bv) in acc.chunks_mut(plane).zip(b) {
            o.fill(bv);
        }
    }
    conv_accumulate(&geom, &input, &kernel, &mut acc);
    let out = acc
        .chunks(plane)
        .zip(mults)
        .flat_map(|(ch, &m)| ch.iter().map(move |&a| requantize(a, m, zp_out)))
        .collect();
    Ok(TensorBuf::i8([1, c_out, geom.oh, geom.ow], out))
}

fn eval_int8(g: &Graph, node: &Node, ins: &[&TensorBuf]) -> Result<Vec<TensorBuf>, ExecError> {
    let out_spec = |i: usize| &g.tensors[&node.outputs[i]];
    let one = |v: TensorBuf| Ok(vec![v]);
    match &node.op {
        OpKind::Conv2d(a) => one(conv_int8(
            node,
            ins[0],
            out_spec(0),
            "kernel",
            "bias",
            requant_for(node, 0)?,
            a.stride,
            a.padding,
        )?),
        OpKind::Detect(_) => node
            .conv_branches()
            .iter()
            .enumerate()
            .map(|(b, (k, bias))| {
                conv_int8(
                    node,
                    ins[b],
                    out_spec(b),
                    k,
                    bias,
                    requant_for(node, b)?,
                    1,
                    0,
                )
            })
            .collect(),
        OpKind::SiLU | OpKind::Sigmoid => {
            let f = if matches!(node.op, OpKind::SiLU) {
                silu
            } else {
                sigmoid
            };
            let lut = activation_lut(f, affine(&ins[0].spec)?, affine(out_spec(0))?);
            let data = ins[0]
                .as_i8()?
                .iter()
                .map(|&q| lut[(q as i32 + 128) as usize])
                .collect();
            one(TensorBuf::i8(ins[0].shape(), data))
        }
        OpKind::MaxPool2d(p) => {
            let (c, _, _) = ins[0].chw();
            let (data, oh, ow) =
                maxpool_plane(ins[0].as_i8()?, ins[0].chw(), p.kernel, p.stride, p.padding)?;
            one(TensorBuf::i8([1, c, oh, ow], data))
        }
        OpKind::UpsampleNearest2x => {
            let (c, h, w) = ins[0].chw();
            one(TensorBuf::i8(
                [1, c, h * 2, w * 2],
                upsample_plane(ins[0].as_i8()?, (c, h, w)),
            ))
        }
        OpKind::ConcatChannels => {
            let (_, zp_out) = affine(out_spec(0))?;
            let (_, h, w) = ins[0].chw();
            let mut data = Vec::new();
            let mut c = 0;
            for (b, x) in ins.iter().enumerate() {
                let m = requant_for(node, b)?[0];
                let (_, zp_in) = affine(&x.spec)?;
                data.extend(
                    x.as_i8()?
                        .iter()
                        .map(|&q| requantize(q as i32 - zp_in as i32, m, zp_out)),
                );
                c += x.chw().0;
            }
            one(TensorBuf::i8([1, c, h, w], data))
        }
        OpKind::Add => {
            let (_, zp_out) = affine(out_spec(0))?;
            let (ma, mb) = (requant_for(node, 0)?[0], requant_for(node, 1)?[0]);
            let (_, za) = affine(&ins[0].spec)?;
            let (_, zb) = affine(&ins[1].spec)?;
            let data = ins[0]
                .as_i8()?
                .iter()
                .zip(ins[1].as_i8()?)
                .map(|(&a, &b)| {
                    let sum = apply_multiplier((a as i32 - za as i32) as i64, ma)
                        + apply_multiplier((b as i32 - zb as i32) as i64, mb);
                    (rounding_shift(sum as i128, ADD_FRAC_BITS) as i64 + zp_out as i64)
                        .clamp(-128, 127) as i8
                })
                .collect();
            one(TensorBuf::i8(ins[0].shape(), data))
        }
        OpKind::BatchNorm { .. } => Err(ExecError::Node {
            node: node.name.clone(),
            msg: "batch norm must be folded before int8 execution".into(),
        }),
    }
}

/// Run a quantized graph on an int8 input (see [`quantize_input`]).
pub fn execute_int8(
    qg: &Graph,
    input: &TensorBuf,
) -> Result<BTreeMap<TensorId, TensorBuf>, ExecError> {
    let mut input = input.clone();
    input.spec.quant = qg.input_spec().quant.clone();
    walk_graph(qg, input, |n, ins| eval_int8(qg, n, ins), |_, _, _, _| {})
}

/// Like [`execute_int8`], also returning per-node timings.
pub fn execute_int8_timed(
    qg: &Graph,
    input: &TensorBuf,
) -> Result<(BTreeMap<TensorId, TensorBuf>, Vec<(String, u64)>), ExecError> {
    let mut input = input.clone();
    input.spec.quant = qg.input_spec().quant.clone();
    let mut timings = Vec::with_capacity(qg.nodes.len());
    let out = walk_graph(
        qg,
        input,
        |n, ins| eval_int8(qg, n, ins),
        |_, n, _, us| timings.push((n.name.clone(), us)),
    )?;
    Ok((out, timings))
}

/// Like [`execute_int8`], calling `observe` with every produced tensor.
pub fn execute_int8_observed(
    qg: &Graph,
    input: &TensorBuf,
    mut observe: impl FnMut(&Node, &TensorBuf),
) -> Result<BTreeMap<TensorId, TensorBuf>, ExecError> {
    let mut input = input.clone();
    input.spec.quant = qg.input_spec().quant.clone();
    walk_graph(
        qg,
        input,
        |n, ins| eval_int8(qg, n, ins),
        |_, n, outs, _| outs.iter().for_each(|b| observe(n, b)),
    )
}
