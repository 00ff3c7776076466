//! Graph construction: a small incremental builder plus the YOLOv5n-shaped
//! detector (backbone, FPN+PAN neck, three-stride Detect head).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    node_output_shapes, ConvAttrs, DType, DetectAttrs, Graph, GraphError, Metadata, Node, OpKind,
    PoolAttrs, Region, Shape, TensorId, TensorSpec, Weight,
};

/// Seed used for the pseudo-random weights when none is given.
pub const DEFAULT_SEED: u64 = 0x5EED_0005;

/// YOLOv5 anchors at the 640-pixel base, (w, h) per stride 8/16/32.
const BASE_ANCHORS: [[[f32; 2]; 3]; 3] = [
    [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]],
    [[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]],
    [[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]],
];
const STRIDES: [usize; 3] = [8, 16, 32];
const BN_EPS: f32 = 1e-3;

/// Incremental graph builder. Shapes are inferred as nodes are appended, so
/// an invalid node is rejected immediately and never enters the graph.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new(input_shape: Shape) -> Self {
        GraphBuilder {
            graph: Graph::empty(input_shape),
        }
    }

    pub fn input(&self) -> TensorId {
        self.graph.input_id
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.graph.tensors[&id].shape
    }

    /// Append `node` reading `inputs`; returns its freshly allocated outputs.
    pub fn push(
        &mut self,
        mut node: Node,
        inputs: &[TensorId],
    ) -> Result<Vec<TensorId>, GraphError> {
        let shapes = inputs
            .iter()
            .map(|t| self.graph.tensor(*t).map(|s| s.shape))
            .collect::<Result<Vec<_>, _>>()?;
        let outs = node_output_shapes(&node, &shapes)?;
        node.inputs = inputs.to_vec();
        let mut next = self.graph.next_tensor_id();
        for shape in outs {
            self.graph.tensors.insert(
                next,
                TensorSpec {
                    id: next,
                    dtype: DType::F32,
                    shape,
                    quant: None,
                },
            );
            node.outputs.push(next);
            next += 1;
        }
        let outputs = node.outputs.clone();
        self.graph.nodes.push(node);
        Ok(outputs)
    }

    fn push1(&mut self, node: Node, inputs: &[TensorId]) -> Result<TensorId, GraphError> {
        Ok(self.push(node, inputs)?[0])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        x: TensorId,
        attrs: ConvAttrs,
        kernel_shape: [usize; 4],
        kernel: Vec<f32>,
        bias: Option<Vec<f32>>,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        let mut node = Node::new(name, OpKind::Conv2d(attrs), region);
        node.weights
            .insert("kernel".into(), Weight::f32(kernel_shape.to_vec(), kernel));
        if let Some(b) = bias {
            node.weights
                .insert("bias".into(), Weight::f32(vec![b.len()], b));
        }
        self.push1(node, &[x])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        name: &str,
        x: TensorId,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        let mut node = Node::new(name, OpKind::BatchNorm { eps }, region);
        for (k, v) in [
            ("gamma", gamma),
            ("beta", beta),
            ("mean", mean),
            ("var", var),
        ] {
            node.weights.insert(k.into(), Weight::f32(vec![v.len()], v));
        }
        self.push1(node, &[x])
    }

    pub fn silu(
        &mut self,
        name: &str,
        x: TensorId,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        self.push1(Node::new(name, OpKind::SiLU, region), &[x])
    }

    pub fn sigmoid(
        &mut self,
        name: &str,
        x: TensorId,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        self.push1(Node::new(name, OpKind::Sigmoid, region), &[x])
    }

    pub fn maxpool(
        &mut self,
        name: &str,
        x: TensorId,
        attrs: PoolAttrs,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        self.push1(Node::new(name, OpKind::MaxPool2d(attrs), region), &[x])
    }

    pub fn upsample(
        &mut self,
        name: &str,
        x: TensorId,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        self.push1(Node::new(name, OpKind::UpsampleNearest2x, region), &[x])
    }

    pub fn concat(
        &mut self,
        name: &str,
        xs: &[TensorId],
        region: Region,
    ) -> Result<TensorId, GraphError> {
        self.push1(Node::new(name, OpKind::ConcatChannels, region), xs)
    }

    pub fn add(
        &mut self,
        name: &str,
        a: TensorId,
        b: TensorId,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        self.push1(Node::new(name, OpKind::Add, region), &[a, b])
    }

    /// Detect head; `branches[i]` holds the 1x1 kernel (C_out*C_in values)
    /// and bias for input `xs[i]`.
    pub fn detect(
        &mut self,
        name: &str,
        xs: &[TensorId],
        attrs: DetectAttrs,
        branches: Vec<(Vec<f32>, Vec<f32>)>,
    ) -> Result<Vec<TensorId>, GraphError> {
        let c_out = attrs.channels_per_head();
        let mut node = Node::new(name, OpKind::Detect(attrs), Region::Head);
        for (i, ((k, b), &x)) in branches.into_iter().zip(xs).enumerate() {
            let c_in = self.graph.tensor(x)?.shape[1];
            node.weights.insert(
                super::wname::detect_kernel(i),
                Weight::f32(vec![c_out, c_in, 1, 1], k),
            );
            node.weights
                .insert(super::wname::detect_bias(i), Weight::f32(vec![b.len()], b));
        }
        self.push(node, xs)
    }

    pub fn finish(
        mut self,
        outputs: Vec<TensorId>,
        metadata: Metadata,
    ) -> Result<Graph, GraphError> {
        self.graph.output_ids = outputs;
        self.graph.metadata = metadata;
        self.graph.validate()?;
        Ok(self.graph)
    }
}

/// Round `x` up to a multiple of `divisor`.
pub fn make_divisible(x: f64, divisor: usize) -> usize {
    ((x / divisor as f64).ceil() as usize * divisor).max(divisor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct YoloConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub width_mult: f32,
    pub depth_mult: f32,
    pub seed: u64,
}

impl YoloConfig {
    /// YOLOv5n multipliers (width 0.25, depth 0.33) with the default seed.
    pub fn new(num_classes: usize, input_size: usize) -> Self {
        YoloConfig {
            num_classes,
            input_size,
            width_mult: 0.25,
            depth_mult: 0.33,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

struct YoloBuilder {
    b: GraphBuilder,
    rng: ChaCha8Rng,
    width: f64,
    depth: f64,
}

impl YoloBuilder {
    fn ch(&self, base: usize) -> usize {
        make_divisible(base as f64 * self.width, 8)
    }

    fn n(&self, base: usize) -> usize {
        ((base as f64 * self.depth).round() as usize).max(1)
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    /// Conv (no bias) -> BatchNorm -> SiLU.
    fn conv_block(
        &mut self,
        name: &str,
        x: TensorId,
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        let c_in = self.b.shape(x)[1];
        let fan_in = (c_in * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let kernel = self.uniform(c_out * c_in * k * k, -bound, bound);
        let y = self.b.conv2d(
            &format!("{name}.conv"),
            x,
            ConvAttrs {
                kernel: k,
                stride: s,
                padding: p,
            },
            [c_out, c_in, k, k],
            kernel,
            None,
            region,
        )?;
        let gamma = self.uniform(c_out, 0.5, 1.5);
        let beta = self.uniform(c_out, -0.2, 0.2);
        // running statistics are measured after construction
        let mean = vec![0.0; c_out];
        let var = vec![1.0; c_out];
        let y = self.b.batch_norm(
            &format!("{name}.bn"),
            y,
            gamma,
            beta,
            mean,
            var,
            BN_EPS,
            region,
        )?;
        self.b.silu(&format!("{name}.act"), y, region)
    }

    fn c3(
        &mut self,
        name: &str,
        x: TensorId,
        c_out: usize,
        n: usize,
        shortcut: bool,
        region: Region,
    ) -> Result<TensorId, GraphError> {
        let hidden = c_out / 2;
        let mut a = self.conv_block(&format!("{name}.cv1"), x, hidden, 1, 1, 0, region)?;
        for i in 0..n {
            let t = self.conv_block(&format!("{name}.m.{i}.cv1"), a, hidden, 1, 1, 0, region)?;
            let t = self.conv_block(&format!("{name}.m.{i}.cv2"), t, hidden, 3, 1, 1, region)?;
            a = if shortcut {
                self.b.add(&format!("{name}.m.{i}.add"), a, t, region)?
            } else {
                t
            };
        }
        let b = self.conv_block(&format!("{name}.cv2"), x, hidden, 1, 1, 0, region)?;
        let cat = self.b.concat(&format!("{name}.cat"), &[a, b], region)?;
        self.conv_block(&format!("{name}.cv3"), cat, c_out, 1, 1, 0, region)
    }

    /// 1x1 conv, three chained 5x5 stride-1 max pools, concat of the four
    /// maps, 1x1 conv.
    fn sppf(&mut self, name: &str, x: TensorId, c_out: usize) -> Result<TensorId, GraphError> {
        let region = Region::Backbone;
        let hidden = self.b.shape(x)[1] / 2;
        let x = self.conv_block(&format!("{name}.cv1"), x, hidden, 1, 1, 0, region)?;
        let pool = PoolAttrs {
            kernel: 5,
            stride: 1,
            padding: 2,
        };
        let y1 = self.b.maxpool(&format!("{name}.m.0"), x, pool, region)?;
        let y2 = self.b.maxpool(&format!("{name}.m.1"), y1, pool, region)?;
        let y3 = self.b.maxpool(&format!("{name}.m.2"), y2, pool, region)?;
        let cat = self
            .b
            .concat(&format!("{name}.cat"), &[x, y1, y2, y3], region)?;
        self.conv_block(&format!("{name}.cv2"), cat, c_out, 1, 1, 0, region)
    }
}

/// Build the YOLOv5n-shaped detector with deterministic pseudo-random
/// weights drawn from `cfg.seed`.
///
/// Kernels, BN affine parameters and head biases are drawn uniformly; BN
/// running mean/variance are then measured on a batch of seeded synthetic
/// scenes at the requested input size, the way a trained network's
/// statistics describe its activations.
pub fn build_yolov5n(cfg: &YoloConfig) -> Result<Graph, GraphError> {
    if cfg.input_size == 0 || !cfg.input_size.is_multiple_of(32) {
        return Err(GraphError::InputSizeNotDivisible(cfg.input_size));
    }
    if cfg.num_classes == 0 {
        return Err(GraphError::InvalidConfig(
            "num_classes must be positive".into(),
        ));
    }
    if !(cfg.width_mult > 0.0 && cfg.depth_mult > 0.0) {
        return Err(GraphError::InvalidConfig(
            "width and depth multipliers must be positive".into(),
        ));
    }
    let mut g = build_raw(cfg, cfg.input_size)?;
    for (name, (mean, var)) in estimate_bn_stats(&g, cfg.seed)? {
        let (i, _) = g.node_by_name(&name).expect("node was just built");
        let node = &mut g.nodes[i];
        node.weights
            .insert("mean".into(), Weight::f32(vec![mean.len()], mean));
        node.weights
            .insert("var".into(), Weight::f32(vec![var.len()], var));
    }
    g.validate_detector()?;
    Ok(g)
}

/// Number of synthetic scenes the BN statistics are pooled over.
const STATS_BATCH: usize = 16;

/// Run the graph over a small batch of seeded synthetic scenes, setting
/// every BN's running mean/variance to the per-channel statistics of its
/// actual input pooled over the batch.
fn estimate_bn_stats(
    g: &Graph,
    seed: u64,
) -> Result<Vec<(String, (Vec<f32>, Vec<f32>))>, GraphError> {
    use crate::engine::{eval_float, synthetic_scene, TensorBuf};
    use rayon::prelude::*;

    let fail = |e: crate::engine::ExecError| {
        GraphError::InvalidConfig(format!("BN statistics pass failed: {e}"))
    };
    let size = g.input_spec().shape[2];
    let mut live: Vec<HashMap<TensorId, TensorBuf>> = (0..STATS_BATCH as u64)
        .map(|k| HashMap::from([(g.input_id, synthetic_scene(seed ^ 0xB47C_5747 ^ k, size))]))
        .collect();
    let consumers = g.consumers();
    let mut remaining: HashMap<TensorId, usize> =
        consumers.iter().map(|(t, c)| (*t, c.len())).collect();
    let mut stats = Vec::new();
    for node in &g.nodes {
        let outs: Vec<TensorBuf> = if let OpKind::BatchNorm { eps } = node.op {
            let xs: Vec<&TensorBuf> = live.iter().map(|m| &m[&node.inputs[0]]).collect();
            let (c, h, w) = xs[0].chw();
            fn plane(x: &TensorBuf, ch: usize, hw: usize) -> &[f32] {
                &x.as_f32().unwrap_or_default()[ch * hw..(ch + 1) * hw]
            }
            let n = (xs.len() * h * w) as f64;
            let (mut means, mut vars) = (Vec::with_capacity(c), Vec::with_capacity(c));
            for ch in 0..c {
                let mut sum = 0f64;
                for x in &xs {
                    sum = plane(x, ch, h * w)
                        .iter()
                        .fold(sum, |acc, &v| acc + f64::from(v));
                }
                let m = sum / n;
                let mut sq = 0f64;
                for x in &xs {
                    sq = plane(x, ch, h * w)
                        .iter()
                        .fold(sq, |acc, &v| acc + (f64::from(v) - m).powi(2));
                }
                means.push(m as f32);
                vars.push(((sq / n) as f32).max(1e-4));
            }
            let gamma = node.weight("gamma")?.data.as_f32().unwrap_or_default();
            let beta = node.weight("beta")?.data.as_f32().unwrap_or_default();
            let outs = xs
                .iter()
                .map(|x| {
                    let mut out = x.as_f32().map_err(fail)?.to_vec();
                    for (ch, plane) in out.chunks_mut(h * w).enumerate() {
                        let inv = gamma[ch] / (vars[ch] + eps).sqrt();
                        let (m, b) = (means[ch], beta[ch]);
                        plane.iter_mut().for_each(|v| *v = (*v - m) * inv + b);
                    }
                    Ok(TensorBuf::f32(x.shape(), out).with_id(node.outputs[0]))
                })
                .collect::<Result<_, GraphError>>()?;
            stats.push((node.name.clone(), (means, vars)));
            outs
        } else {
            live.par_iter()
                .map(|m| {
                    let ins: Vec<&TensorBuf> = node.inputs.iter().map(|t| &m[t]).collect();
                    let mut out = eval_float(node, &ins).map_err(fail)?;
                    Ok(out.remove(0).with_id(node.outputs[0]))
                })
                .collect::<Result<_, GraphError>>()?
        };
        for t in &node.inputs {
            if let Some(r) = remaining.get_mut(t) {
                *r -= 1;
                if *r == 0 {
                    live.iter_mut().for_each(|m| {
                        m.remove(t);
                    });
                }
            }
        }
        if !matches!(node.op, OpKind::Detect(_)) {
            for (m, o) in live.iter_mut().zip(outs) {
                m.insert(o.id(), o);
            }
        }
    }
    Ok(stats)
}

fn build_raw(cfg: &YoloConfig, s: usize) -> Result<Graph, GraphError> {
    let mut y = YoloBuilder {
        b: GraphBuilder::new([1, 3, s, s]),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        width: cfg.width_mult as f64,
        depth: cfg.depth_mult as f64,
    };
    let bb = Region::Backbone;
    let nk = Region::Neck;

    // backbone
    let x = y.b.input();
    let (c64, c128, c256, c512, c1024) = (y.ch(64), y.ch(128), y.ch(256), y.ch(512), y.ch(1024));
    let x = y.conv_block("model.0", x, c64, 6, 2, 2, bb)?;
    let x = y.conv_block("model.1", x, c128, 3, 2, 1, bb)?;
    let x = y.c3("model.2", x, c128, y.n(3), true, bb)?;
    let x = y.conv_block("model.3", x, c256, 3, 2, 1, bb)?;
    let p3 = y.c3("model.4", x, c256, y.n(6), true, bb)?;
    let x = y.conv_block("model.5", p3, c512, 3, 2, 1, bb)?;
    let p4 = y.c3("model.6", x, c512, y.n(9), true, bb)?;
    let x = y.conv_block("model.7", p4, c1024, 3, 2, 1, bb)?;
    let x = y.c3("model.8", x, c1024, y.n(3), true, bb)?;
    let x = y.sppf("model.9", x, c1024)?;

    // neck: FPN top-down
    let h10 = y.conv_block("model.10", x, c512, 1, 1, 0, nk)?;
    let u = y.b.upsample("model.11", h10, nk)?;
    let c = y.b.concat("model.12", &[u, p4], nk)?;
    let x = y.c3("model.13", c, c512, y.n(3), false, nk)?;
    let h14 = y.conv_block("model.14", x, c256, 1, 1, 0, nk)?;
    let u = y.b.upsample("model.15", h14, nk)?;
    let c = y.b.concat("model.16", &[u, p3], nk)?;
    let out3 = y.c3("model.17", c, c256, y.n(3), false, nk)?;
    // PAN bottom-up
    let x = y.conv_block("model.18", out3, c256, 3, 2, 1, nk)?;
    let c = y.b.concat("model.19", &[x, h14], nk)?;
    let out4 = y.c3("model.20", c, c512, y.n(3), false, nk)?;
    let x = y.conv_block("model.21", out4, c512, 3, 2, 1, nk)?;
    let c = y.b.concat("model.22", &[x, h10], nk)?;
    let out5 = y.c3("model.23", c, c1024, y.n(3), false, nk)?;

    // head
    let scale = s as f32 / 640.0;
    let anchors = BASE_ANCHORS
        .iter()
        .map(|t| t.map(|[w, h]| [w * scale, h * scale]))
        .collect();
    let attrs = DetectAttrs {
        num_classes: cfg.num_classes,
        strides: STRIDES.to_vec(),
        anchors,
    };
    let c_out = attrs.channels_per_head();
    let mut branches = Vec::new();
    for &x in &[out3, out4, out5] {
        let c_in = y.b.shape(x)[1];
        let bound = (3.0 / c_in as f32).sqrt();
        let k = y.uniform(c_out * c_in, -bound, bound);
        let b = y.uniform(c_out, -1.0, 1.0);
        branches.push((k, b));
    }
    let outs =
        y.b.detect("model.24", &[out3, out4, out5], attrs, branches)?;

    let g = y.b.finish(
        outs,
        Metadata {
            num_classes: cfg.num_classes,
            input_size: s,
            width_mult: cfg.width_mult,
            depth_mult: cfg.depth_mult,
        },
    )?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::count_params;

    #[test]
    fn head_shapes_at_192() {
        let g = build_yolov5n(&YoloConfig::new(2, 192)).unwrap();
        let shapes: Vec<_> = g.output_ids.iter().map(|t| g.tensors[t].shape).collect();
        assert_eq!(
            shapes,
            vec![[1, 21, 24, 24], [1, 21, 12, 12], [1, 21, 6, 6]]
        );
    }

    #[test]
    fn node_count_independent_of_input_size() {
        let a = build_yolov5n(&YoloConfig::new(2, 192)).unwrap();
        let b = build_yolov5n(&YoloConfig::new(2, 224)).unwrap();
        assert_eq!(a.nodes.len(), b.nodes.len());
        assert_eq!(count_params(&a), count_params(&b));
        for (na, nb) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(na.name, nb.name);
        }
    }

    #[test]
    fn rejects_unaligned_input() {
        assert_eq!(
            build_yolov5n(&YoloConfig::new(2, 200)).unwrap_err(),
            GraphError::InputSizeNotDivisible(200)
        );
    }

    #[test]
    fn yolov5n_channel_plan() {
        assert_eq!(make_divisible(64.0 * 0.25, 8), 16);
        assert_eq!(make_divisible(1024.0 * 0.25, 8), 256);
        let g = build_yolov5n(&YoloConfig::new(80, 640)).unwrap();
        let regions: std::collections::BTreeMap<_, _> = g
            .nodes
            .iter()
            .map(|n| (n.name.as_str(), n.region))
            .collect();
        assert_eq!(regions["model.9.cv2.conv"], Region::Backbone);
        assert_eq!(regions["model.10.conv"], Region::Neck);
        assert_eq!(regions["model.24"], Region::Head);
        // C3 depth: 3,6,9,3 * 0.33 rounded -> 1,2,3,1
        assert!(g.node_by_name("model.6.m.2.cv2.conv").is_some());
        assert!(g.node_by_name("model.6.m.3.cv1.conv").is_none());
        assert!(g.node_by_name("model.4.m.1.add").is_some());
        assert!(g.node_by_name("model.13.m.0.add").is_none());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_yolov5n(&YoloConfig::new(2, 192)).unwrap();
        let b = build_yolov5n(&YoloConfig::new(2, 192)).unwrap();
        assert_eq!(a, b);
        let c = build_yolov5n(&YoloConfig::new(2, 192).with_seed(7)).unwrap();
        assert_ne!(a, c);
    }
}
