//! Post-training int8 quantization: calibration, parameter selection,
//! fixed-point multipliers and the graph rewrite.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CompressError;
use crate::engine::{execute_float_observed, TensorBuf};
use crate::ir::{
    wname, DType, Graph, OpKind, QuantParams, RequantMultiplier, TensorId, Weight, WeightData,
};

/// Smallest scale ever produced; constant-zero tensors get this.
pub const MIN_SCALE: f32 = 1e-8;

/// Fractional bits kept by the Add kernel before its final rounding.
pub const ADD_FRAC_BITS: u32 = 16;

/// Running range of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f32,
    pub max: f32,
}

impl MinMax {
    pub fn of(values: &[f32]) -> Self {
        values.iter().fold(
            MinMax {
                min: f32::INFINITY,
                max: f32::NEG_INFINITY,
            },
            |acc, &v| MinMax {
                min: acc.min.min(v),
                max: acc.max.max(v),
            },
        )
    }

    pub fn merge(self, other: MinMax) -> MinMax {
        MinMax {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Output of [`calibrate`]: per-tensor activation parameters and
/// per-channel weight parameters keyed by node name, then weight name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Calibration {
    pub activations: BTreeMap<TensorId, QuantParams>,
    pub weights: BTreeMap<String, BTreeMap<String, QuantParams>>,
}

/// Per-tensor affine parameters mapping `[min, max]` (widened to contain
/// zero) onto `[-128, 127]`.
pub fn affine_params(min: f32, max: f32) -> QuantParams {
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    let scale = ((hi - lo) / 255.0).max(MIN_SCALE);
    let zp = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i8;
    QuantParams::PerTensorAffine {
        scale,
        zero_point: zp,
    }
}

pub fn symmetric_scale(values: &[f32]) -> f32 {
    let max_abs = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    (max_abs / 127.0).max(MIN_SCALE)
}

/// Per-output-channel symmetric parameters of a `(C_out, ...)` kernel.
pub fn weight_params(kernel: &Weight) -> Result<QuantParams, CompressError> {
    let data = kernel
        .data
        .as_f32()
        .ok_or_else(|| CompressError::Unsupported("kernel is already quantized".into()))?;
    let c_out = kernel.shape.first().copied().unwrap_or(0).max(1);
    let per = data.len() / c_out;
    Ok(QuantParams::PerChannelSymmetric {
        scales: data.chunks(per.max(1)).map(symmetric_scale).collect(),
    })
}

pub fn quantize_affine(x: f32, scale: f32, zero_point: i8) -> i8 {
    ((x as f64 / scale as f64).round() + zero_point as f64).clamp(-128.0, 127.0) as i8
}

pub fn dequantize_affine(q: i8, scale: f32, zero_point: i8) -> f32 {
    (q as i32 - zero_point as i32) as f32 * scale
}

pub fn quantize_symmetric(w: f32, scale: f32) -> i8 {
    (w as f64 / scale as f64).round().clamp(-127.0, 127.0) as i8
}

/// `(mantissa, shift)` with mantissa in `[2^30, 2^31)` and
/// `mantissa * 2^-shift ≈ r`, for any `r` in `(0, 2^30)`.
fn normalized_multiplier(r: f64) -> Result<RequantMultiplier, CompressError> {
    if !(r.is_finite() && r > 0.0 && r < (1u64 << 30) as f64) {
        return Err(CompressError::MultiplierRange(r));
    }
    // r = f * 2^e with f in [0.5, 1)
    let mut e = r.log2().floor() as i32 + 1;
    let mut f = r * (-e as f64).exp2();
    while f >= 1.0 {
        f /= 2.0;
        e += 1;
    }
    while f < 0.5 {
        f *= 2.0;
        e -= 1;
    }
    let mut m = (f * (1u64 << 31) as f64).round() as i64;
    let mut shift = 31 - e;
    if m == 1 << 31 {
        m = 1 << 30;
        shift -= 1;
    }
    Ok(RequantMultiplier {
        mantissa: m as i32,
        right_shift: shift as u32,
    })
}

/// Fixed-point form of a real multiplier strictly between 0 and 1.
pub fn quantize_multiplier(r: f64) -> Result<RequantMultiplier, CompressError> {
    if !(r > 0.0 && r < 1.0) {
        return Err(CompressError::MultiplierRange(r));
    }
    normalized_multiplier(r)
}

/// `round(x * 2^-shift)`, ties away from zero.
pub fn rounding_shift(x: i128, shift: u32) -> i128 {
    if shift == 0 {
        return x;
    }
    if shift >= 127 {
        return 0;
    }
    let half = 1i128 << (shift - 1);
    if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    }
}

/// `round(x * m)` for a fixed-point multiplier.
pub fn apply_multiplier(x: i64, m: RequantMultiplier) -> i64 {
    rounding_shift(x as i128 * m.mantissa as i128, m.right_shift) as i64
}

/// Map an i32 accumulator to the int8 output domain.
pub fn requantize(acc: i32, m: RequantMultiplier, zero_point: i8) -> i8 {
    (apply_multiplier(acc as i64, m) + zero_point as i64).clamp(-128, 127) as i8
}

/// Collect activation ranges over `inputs` and per-channel weight scales.
///
/// The graph input range always includes `[0, 1]` so that images scaled by
/// 1/255 keep exact 8-bit levels.
pub fn calibrate(g: &Graph, inputs: &[TensorBuf]) -> Result<Calibration, CompressError> {
    if inputs.is_empty() {
        return Err(CompressError::EmptyCalibration);
    }
    if let Some(n) = g
        .nodes
        .iter()
        .find(|n| matches!(n.op, OpKind::BatchNorm { .. }))
    {
        return Err(CompressError::UnfoldedBatchNorm(n.name.clone()));
    }
    let merge = |mut a: BTreeMap<TensorId, MinMax>, b: BTreeMap<TensorId, MinMax>| {
        for (t, r) in b {
            a.entry(t).and_modify(|x| *x = x.merge(r)).or_insert(r);
        }
        a
    };
    let ranges = inputs
        .par_iter()
        .map(|input| {
            let mut seen = BTreeMap::new();
            execute_float_observed(g, input, |buf| {
                if let Ok(v) = buf.as_f32() {
                    seen.insert(buf.id(), MinMax::of(v));
                }
            })?;
            Ok(seen)
        })
        .collect::<Result<Vec<_>, CompressError>>()?
        .into_iter()
        .reduce(merge)
        .unwrap_or_default();

    let mut ranges = ranges;
    if let Some(r) = ranges.get_mut(&g.input_id) {
        *r = r.merge(MinMax { min: 0.0, max: 1.0 });
    }
    let groups = shared_grids(g);
    let mut merged: BTreeMap<TensorId, MinMax> = BTreeMap::new();
    for (&t, r) in &ranges {
        merged
            .entry(groups[&t])
            .and_modify(|x| *x = x.merge(*r))
            .or_insert(*r);
    }
    let mut cal = Calibration::default();
    for &t in ranges.keys() {
        let r = merged[&groups[&t]];
        cal.activations.insert(t, affine_params(r.min, r.max));
    }
    for n in &g.nodes {
        for (k, _) in n.conv_branches() {
            cal.weights
                .entry(n.name.clone())
                .or_default()
                .insert(k.clone(), weight_params(n.weight(&k)?)?);
        }
    }
    Ok(cal)
}

/// Representative tensor for every tensor: tensors that must live on one
/// quantization grid (pool and upsample inputs and outputs) map to the
/// same representative.
fn shared_grids(g: &Graph) -> BTreeMap<TensorId, TensorId> {
    let mut parent: BTreeMap<TensorId, TensorId> = g.tensors.keys().map(|&t| (t, t)).collect();
    fn find(p: &mut BTreeMap<TensorId, TensorId>, t: TensorId) -> TensorId {
        let mut r = t;
        while p[&r] != r {
            r = p[&r];
        }
        p.insert(t, r);
        r
    }
    for n in &g.nodes {
        if matches!(n.op, OpKind::MaxPool2d(_) | OpKind::UpsampleNearest2x) {
            for &x in &n.inputs {
                let (a, b) = (find(&mut parent, x), find(&mut parent, n.outputs[0]));
                parent.insert(a.max(b), a.min(b));
            }
        }
    }
    let keys: Vec<TensorId> = parent.keys().copied().collect();
    keys.into_iter()
        .map(|t| (t, find(&mut parent, t)))
        .collect()
}

fn affine_of_spec(spec: &crate::ir::TensorSpec) -> (f32, i8) {
    spec.quant
        .as_ref()
        .and_then(QuantParams::affine)
        .expect("activation parameters assigned before use")
}

/// Rewrite a folded float graph into int8: i8 kernels with per-channel
/// scales, i32 biases, i8 activations and requantization multipliers.
pub fn quantize_graph(g: &Graph, cal: &Calibration) -> Result<Graph, CompressError> {
    if let Some(n) = g
        .nodes
        .iter()
        .find(|n| matches!(n.op, OpKind::BatchNorm { .. }))
    {
        return Err(CompressError::UnfoldedBatchNorm(n.name.clone()));
    }
    if g.is_quantized() {
        return Err(CompressError::Unsupported(
            "graph is already quantized".into(),
        ));
    }
    let producers = g.producers();
    let describe = |t: TensorId| match producers.get(&t) {
        Some(&i) => format!("output of `{}`", g.nodes[i].name),
        None => "graph input".to_string(),
    };
    let mut q = g.clone();
    for spec in q.tensors.values_mut() {
        let p = cal
            .activations
            .get(&spec.id)
            .ok_or_else(|| CompressError::MissingParams {
                tensor: spec.id,
                context: describe(spec.id),
            })?;
        spec.quant = Some(p.clone());
        spec.dtype = DType::I8;
    }
    // Pools and upsampling only move values around, so their outputs share
    // the input grid; propagated in node order so chains stay consistent.
    for n in &g.nodes {
        if matches!(n.op, OpKind::MaxPool2d(_) | OpKind::UpsampleNearest2x) {
            let p = q.tensors[&n.inputs[0]].quant.clone();
            q.tensors.get_mut(&n.outputs[0]).expect("declared").quant = p;
        }
    }

    for node in q.nodes.iter_mut() {
        for (b, (kn, bn)) in node.conv_branches().into_iter().enumerate() {
            let x = node.inputs[if matches!(node.op, OpKind::Detect(_)) {
                b
            } else {
                0
            }];
            let (s_in, _) = affine_of_spec(&q.tensors[&x]);
            let kernel = node.weight(&kn)?;
            let scales = cal
                .weights
                .get(&node.name)
                .and_then(|w| w.get(&kn))
                .and_then(QuantParams::channel_scales)
                .ok_or_else(|| CompressError::MissingWeightParams {
                    node: node.name.clone(),
                    weight: kn.clone(),
                })?
                .to_vec();
            let data = kernel.data.as_f32().expect("float graph");
            let per = data.len() / scales.len();
            let qk: Vec<i8> = data
                .chunks(per)
                .zip(&scales)
                .flat_map(|(ch, &s)| ch.iter().map(move |&w| quantize_symmetric(w, s)))
                .collect();
            let bias: Vec<f32> = match node.weights.get(&bn) {
                Some(w) => w.data.as_f32().expect("float graph").to_vec(),
                None => vec![0.0; scales.len()],
            };
            let qb: Vec<i32> = bias
                .iter()
                .zip(&scales)
                .map(|(&b, &s)| {
                    (b as f64 / (s_in as f64 * s as f64))
                        .round()
                        .clamp(i32::MIN as f64, i32::MAX as f64) as i32
                })
                .collect();
            let shape = kernel.shape.clone();
            node.weights.insert(
                kn,
                Weight {
                    shape,
                    data: WeightData::I8(qk),
                    quant: Some(QuantParams::PerChannelSymmetric { scales }),
                },
            );
            node.weights.insert(
                bn,
                Weight {
                    shape: vec![qb.len()],
                    data: WeightData::I32(qb),
                    quant: None,
                },
            );
        }
    }
    attach_requant(&mut q)?;
    debug_assert!(q.nodes.iter().all(|n| n
        .weights
        .get(wname::KERNEL)
        .is_none_or(|w| w.data.dtype() == DType::I8)));
    Ok(q)
}

/// Derive every node's fixed-point multipliers from the activation and
/// weight scales of a quantized graph. Multipliers are not serialized;
/// loading a quantized model recomputes them here.
pub fn attach_requant(q: &mut Graph) -> Result<(), CompressError> {
    let tensors = &q.tensors;
    let s_of = |t: TensorId| -> Result<f64, CompressError> {
        tensors
            .get(&t)
            .and_then(|s| s.quant.as_ref())
            .and_then(QuantParams::affine)
            .map(|(s, _)| s as f64)
            .ok_or_else(|| CompressError::MissingParams {
                tensor: t,
                context: "activation".into(),
            })
    };
    for node in q.nodes.iter_mut() {
        let mut requant = Vec::new();
        match &node.op {
            OpKind::Conv2d(_) | OpKind::Detect(_) => {
                for (b, (kn, _)) in node.conv_branches().into_iter().enumerate() {
                    let x = node.inputs[if matches!(node.op, OpKind::Detect(_)) {
                        b
                    } else {
                        0
                    }];
                    let (s_in, s_out) = (s_of(x)?, s_of(node.outputs[b])?);
                    let scales = node
                        .weight(&kn)?
                        .quant
                        .as_ref()
                        .and_then(QuantParams::channel_scales)
                        .ok_or_else(|| CompressError::MissingWeightParams {
                            node: node.name.clone(),
                            weight: kn.clone(),
                        })?;
                    requant.push(
                        scales
                            .iter()
                            .map(|&s| normalized_multiplier(s_in * s as f64 / s_out))
                            .collect::<Result<Vec<_>, _>>()?,
                    );
                }
            }
            OpKind::ConcatChannels => {
                let s_out = s_of(node.outputs[0])?;
                for &x in &node.inputs {
                    requant.push(vec![normalized_multiplier(s_of(x)? / s_out)?]);
                }
            }
            OpKind::Add => {
                let s_out = s_of(node.outputs[0])?;
                for &x in &node.inputs {
                    let r = s_of(x)? / s_out * (1u64 << ADD_FRAC_BITS) as f64;
                    requant.push(vec![normalized_multiplier(r)?]);
                }
            }
            _ => {}
        }
        node.requant = requant;
    }
    Ok(())
}
