use super::{Graph, GraphError, Node, OpKind, Shape};

/// Output length of a convolution or pool along one spatial axis, or `None`
/// when the window does not fit in the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn mismatch(node: &Node, msg: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch {
        node: node.name.clone(),
        msg: msg.into(),
    }
}

fn kernel_shape(node: &Node, name: &str) -> Result<[usize; 4], GraphError> {
    let w = node.weight(name)?;
    match w.shape.as_slice() {
        &[co, ci, kh, kw] if kh == kw => Ok([co, ci, kh, kw]),
        other => Err(mismatch(
            node,
            format!("kernel `{name}` must be (C_out, C_in, k, k), got {other:?}"),
        )),
    }
}

fn check_bias(node: &Node, name: &str, c_out: usize) -> Result<(), GraphError> {
    if let Some(b) = node.weights.get(name) {
        if b.numel() != c_out {
            return Err(mismatch(
                node,
                format!("bias `{name}` has {} entries, expected {c_out}", b.numel()),
            ));
        }
    }
    Ok(())
}

fn conv_shape(
    node: &Node,
    input: Shape,
    kernel_name: &str,
    bias_name: &str,
    stride: usize,
    padding: usize,
) -> Result<Shape, GraphError> {
    let [co, ci, k, _] = kernel_shape(node, kernel_name)?;
    if ci != input[1] {
        return Err(mismatch(
            node,
            format!("kernel expects {ci} input channels, input has {}", input[1]),
        ));
    }
    check_bias(node, bias_name, co)?;
    let oh = conv_out_dim(input[2], k, stride, padding);
    let ow = conv_out_dim(input[3], k, stride, padding);
    match (oh, ow) {
        (Some(h), Some(w)) => Ok([input[0], co, h, w]),
        _ => Err(mismatch(
            node,
            format!("kernel {k} larger than padded input {:?}", &input[2..]),
        )),
    }
}

/// Output shapes of `node` given its input shapes.
pub fn node_output_shapes(node: &Node, inputs: &[Shape]) -> Result<Vec<Shape>, GraphError> {
    let arity = |n: usize| -> Result<(), GraphError> {
        if inputs.len() != n {
            Err(mismatch(
                node,
                format!("expected {n} inputs, got {}", inputs.len()),
            ))
        } else {
            Ok(())
        }
    };
    match &node.op {
        OpKind::Conv2d(a) => {
            arity(1)?;
            Ok(vec![conv_shape(
                node, inputs[0], "kernel", "bias", a.stride, a.padding,
            )?])
        }
        OpKind::BatchNorm { .. } => {
            arity(1)?;
            for p in ["gamma", "beta", "mean", "var"] {
                let w = node.weight(p)?;
                if w.numel() != inputs[0][1] {
                    return Err(mismatch(
                        node,
                        format!(
                            "`{p}` has {} entries for {} channels",
                            w.numel(),
                            inputs[0][1]
                        ),
                    ));
                }
            }
            Ok(vec![inputs[0]])
        }
        OpKind::SiLU | OpKind::Sigmoid => {
            arity(1)?;
            Ok(vec![inputs[0]])
        }
        OpKind::MaxPool2d(p) => {
            arity(1)?;
            let s = inputs[0];
            match (
                conv_out_dim(s[2], p.kernel, p.stride, p.padding),
                conv_out_dim(s[3], p.kernel, p.stride, p.padding),
            ) {
                (Some(h), Some(w)) => Ok(vec![[s[0], s[1], h, w]]),
                _ => Err(mismatch(node, "pool window larger than padded input")),
            }
        }
        OpKind::UpsampleNearest2x => {
            arity(1)?;
            let s = inputs[0];
            Ok(vec![[s[0], s[1], s[2] * 2, s[3] * 2]])
        }
        OpKind::ConcatChannels => {
            if inputs.is_empty() {
                return Err(mismatch(node, "concat needs at least one input"));
            }
            let first = inputs[0];
            let mut channels = 0;
            for s in inputs {
                if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                    return Err(mismatch(
                        node,
                        format!("concat inputs disagree on N,H,W: {first:?} vs {s:?}"),
                    ));
                }
                channels += s[1];
            }
            Ok(vec![[first[0], channels, first[2], first[3]]])
        }
        OpKind::Add => {
            arity(2)?;
            if inputs[0] != inputs[1] {
                return Err(mismatch(
                    node,
                    format!("add inputs differ: {:?} vs {:?}", inputs[0], inputs[1]),
                ));
            }
            Ok(vec![inputs[0]])
        }
        OpKind::Detect(d) => {
            arity(d.strides.len())?;
            if d.anchors.len() != d.strides.len() {
                return Err(mismatch(node, "one anchor triple per stride required"));
            }
            let mut out = Vec::with_capacity(inputs.len());
            for (i, &s) in inputs.iter().enumerate() {
                let shape = conv_shape(
                    node,
                    s,
                    &super::wname::detect_kernel(i),
                    &super::wname::detect_bias(i),
                    1,
                    0,
                )?;
                if shape[1] != d.channels_per_head() {
                    return Err(mismatch(
                        node,
                        format!(
                            "head {i} has {} channels, expected 3*(5+{})",
                            shape[1], d.num_classes
                        ),
                    ));
                }
                out.push(shape);
            }
            Ok(out)
        }
    }
}

/// Recompute every tensor shape from the input shape, in node order.
pub fn infer_shapes(g: &Graph) -> Result<Graph, GraphError> {
    g.validate()?;
    let mut out = g.clone();
    for node in &g.nodes {
        let ins = node
            .inputs
            .iter()
            .map(|t| out.tensor(*t).map(|s| s.shape))
            .collect::<Result<Vec<_>, _>>()?;
        let shapes = node_output_shapes(node, &ins)?;
        if shapes.len() != node.outputs.len() {
            return Err(mismatch(
                node,
                format!(
                    "produces {} tensors, declares {}",
                    shapes.len(),
                    node.outputs.len()
                ),
            ));
        }
        for (t, s) in node.outputs.iter().zip(shapes) {
            if s.contains(&0) {
                return Err(mismatch(node, format!("inferred empty shape {s:?}")));
            }
            out.tensors.get_mut(t).expect("validated").shape = s;
        }
    }
    Ok(out)
}
