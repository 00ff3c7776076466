use std::collections::BTreeMap;

use super::{Graph, GraphError, Node, OpKind, Weight};

/// Absorb every BatchNorm into the convolution feeding it:
/// `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`.
///
/// The convolution takes over the BatchNorm's output tensor, so downstream
/// references are untouched.
pub fn fold_batchnorm(g: &Graph) -> Result<Graph, GraphError> {
    let producers = g.producers();
    let consumers = g.consumers();
    // conv node index -> bn node index
    let mut folds: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if !matches!(n.op, OpKind::BatchNorm { .. }) {
            continue;
        }
        let src = n.inputs[0];
        let conv = producers
            .get(&src)
            .copied()
            .filter(|&p| matches!(g.nodes[p].op, OpKind::Conv2d(_)))
            .filter(|_| consumers.get(&src).map_or(0, Vec::len) == 1)
            .filter(|_| !g.output_ids.contains(&src))
            .ok_or_else(|| GraphError::DanglingBatchNorm(n.name.clone()))?;
        folds.insert(conv, i);
    }

    let mut out = g.clone();
    let mut drop = vec![false; g.nodes.len()];
    for (&ci, &bi) in &folds {
        let bn = &g.nodes[bi];
        let folded = fold_pair(&g.nodes[ci], bn)?;
        let old_out = g.nodes[ci].outputs[0];
        out.nodes[ci] = folded;
        out.nodes[ci].outputs = bn.outputs.clone();
        out.tensors.remove(&old_out);
        drop[bi] = true;
    }
    let mut idx = 0;
    out.nodes.retain(|_| {
        let keep = !drop[idx];
        idx += 1;
        keep
    });
    out.validate()?;
    Ok(out)
}

fn f32_data<'a>(node: &'a Node, name: &str) -> Result<&'a [f32], GraphError> {
    node.weight(name)?
        .data
        .as_f32()
        .ok_or_else(|| GraphError::InvalidNode {
            node: node.name.clone(),
            msg: format!("`{name}` must be f32 to fold"),
        })
}

fn fold_pair(conv: &Node, bn: &Node) -> Result<Node, GraphError> {
    let OpKind::BatchNorm { eps } = bn.op else {
        unreachable!("caller matched BatchNorm")
    };
    let kernel = conv.weight("kernel")?;
    let k = f32_data(conv, "kernel")?;
    let c_out = kernel.shape[0];
    let per_out = k.len() / c_out;
    let gamma = f32_data(bn, "gamma")?;
    let beta = f32_data(bn, "beta")?;
    let mean = f32_data(bn, "mean")?;
    let var = f32_data(bn, "var")?;
    let bias = match conv.weights.get("bias") {
        Some(_) => f32_data(conv, "bias")?.to_vec(),
        None => vec![0.0; c_out],
    };

    let mut new_k = Vec::with_capacity(k.len());
    let mut new_b = Vec::with_capacity(c_out);
    for c in 0..c_out {
        let factor = gamma[c] / (var[c] + eps).sqrt();
        new_k.extend(k[c * per_out..(c + 1) * per_out].iter().map(|w| w * factor));
        new_b.push((bias[c] - mean[c]) * factor + beta[c]);
    }
    let mut node = conv.clone();
    node.weights
        .insert("kernel".into(), Weight::f32(kernel.shape.clone(), new_k));
    node.weights
        .insert("bias".into(), Weight::f32(vec![c_out], new_b));
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{count_params, ConvAttrs, GraphBuilder, Metadata, Region};

    fn conv_bn(w: f32, b: f32, gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> Graph {
        let mut gb = GraphBuilder::new([1, 1, 2, 2]);
        let x = gb.input();
        let y = gb
            .conv2d(
                "c",
                x,
                ConvAttrs {
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                [1, 1, 1, 1],
                vec![w],
                Some(vec![b]),
                Region::Backbone,
            )
            .unwrap();
        let y = gb
            .batch_norm(
                "bn",
                y,
                vec![gamma],
                vec![beta],
                vec![mean],
                vec![var],
                eps,
                Region::Backbone,
            )
            .unwrap();
        gb.finish(vec![y], Metadata::default()).unwrap()
    }

    fn folded_wb(g: &Graph) -> (f32, f32) {
        let f = fold_batchnorm(g).unwrap();
        assert_eq!(f.nodes.len(), 1);
        let n = &f.nodes[0];
        (
            n.weights["kernel"].data.as_f32().unwrap()[0],
            n.weights["bias"].data.as_f32().unwrap()[0],
        )
    }

    #[test]
    fn identity_normalization() {
        assert_eq!(
            folded_wb(&conv_bn(0.75, -0.5, 1.0, 0.0, 0.0, 1.0, 0.0)),
            (0.75, -0.5)
        );
    }

    #[test]
    fn hand_evaluated_fold() {
        assert_eq!(
            folded_wb(&conv_bn(2.0, 1.0, 2.0, 3.0, 1.0, 4.0, 0.0)),
            (2.0, 3.0)
        );
    }

    #[test]
    fn fold_keeps_output_ids_and_shrinks_params() {
        let g = conv_bn(2.0, 1.0, 2.0, 3.0, 1.0, 4.0, 0.0);
        let f = fold_batchnorm(&g).unwrap();
        assert_eq!(f.output_ids, g.output_ids);
        assert!(count_params(&f) <= count_params(&g));
        assert!(f
            .nodes
            .iter()
            .all(|n| !matches!(n.op, OpKind::BatchNorm { .. })));
    }

    #[test]
    fn dangling_bn_rejected() {
        let mut gb = GraphBuilder::new([1, 1, 2, 2]);
        let x = gb.input();
        let y = gb.silu("act", x, Region::Backbone).unwrap();
        let y = gb
            .batch_norm(
                "bn",
                y,
                vec![1.0],
                vec![0.0],
                vec![0.0],
                vec![1.0],
                1e-3,
                Region::Backbone,
            )
            .unwrap();
        let g = gb.finish(vec![y], Metadata::default()).unwrap();
        assert_eq!(
            fold_batchnorm(&g).unwrap_err(),
            GraphError::DanglingBatchNorm("bn".into())
        );
    }
}
