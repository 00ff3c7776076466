use super::{numel, Graph, GraphError, Node, OpKind};

/// Element count of every constant tensor owned by the node.
pub fn node_params(node: &Node) -> usize {
    node.weights.values().map(|w| w.numel()).sum()
}

/// Sum of element counts over all weight tensors (kernels, biases and BN
/// vectors, running statistics included).
pub fn count_params(g: &Graph) -> usize {
    g.nodes.iter().map(node_params).sum()
}

/// Multiply-accumulates of one node: `C_out*H_out*W_out*C_in*k^2` for each
/// convolution (Detect counts its three 1x1 branches); zero otherwise.
pub fn node_macs(g: &Graph, node: &Node) -> Result<usize, GraphError> {
    let shape_of = |t| -> Result<_, GraphError> {
        let s = g.tensor(t)?.shape;
        if s.contains(&0) {
            return Err(GraphError::MissingShape(t));
        }
        Ok(s)
    };
    match &node.op {
        OpKind::Conv2d(_) | OpKind::Detect(_) => {
            let mut total = 0;
            for (i, (kname, _)) in node.conv_branches().iter().enumerate() {
                let k = node.weight(kname)?;
                let per_out = k.shape[1..].iter().product::<usize>();
                let out = shape_of(node.outputs[i])?;
                shape_of(node.inputs[i])?;
                total += numel(&out) * per_out;
            }
            Ok(total)
        }
        _ => Ok(0),
    }
}

pub fn count_macs(g: &Graph) -> Result<usize, GraphError> {
    g.nodes.iter().map(|n| node_macs(g, n)).sum()
}
