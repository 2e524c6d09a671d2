//! Lowering passes onto the Linear/ReLU/Add/Sub core.
//!
//! Every pass returns a new graph with identical forward semantics.

use crate::error::{Error, Result};
use crate::graph::{
    conv_geometry, conv_source, pool_windows, Conv2d, Graph, Node, NodeId, NodeKind, PaddingMode,
    Tensor, TensorShape,
};
use crate::matrix::Matrix;

/// Copies nodes in topological order, letting `expand` replace a node by a
/// subgraph. `expand` receives the already-remapped inputs and returns the
/// id standing in for the original node, or `None` to copy it verbatim.
fn rebuild(
    graph: &Graph,
    mut expand: impl FnMut(&mut Vec<Node>, NodeId, &[NodeId]) -> Result<Option<NodeId>>,
) -> Result<Graph> {
    graph.ensure_valid()?;
    let mut nodes: Vec<Node> = Vec::with_capacity(graph.len());
    let mut remap = vec![NodeId(usize::MAX); graph.len()];
    for &id in graph.topo() {
        let node = graph.node(id);
        let inputs: Vec<NodeId> = node.inputs.iter().map(|p| remap[p.0]).collect();
        remap[id.0] = match expand(&mut nodes, id, &inputs)? {
            Some(new_id) => new_id,
            None => push(&mut nodes, node.name.clone(), node.kind.clone(), inputs),
        };
    }
    let g = Graph::new(nodes, remap[graph.input().0], remap[graph.output().0])?
        .with_dtype(graph.dtype());
    g.ensure_valid()?;
    Ok(g)
}

fn push(nodes: &mut Vec<Node>, name: String, kind: NodeKind, inputs: Vec<NodeId>) -> NodeId {
    nodes.push(Node { name, kind, inputs });
    NodeId(nodes.len() - 1)
}

fn linear_kind(weight: Matrix, bias: Vec<f64>, out_shape: Option<TensorShape>) -> Result<NodeKind> {
    Ok(NodeKind::Linear {
        weight: Tensor::from_matrix(&weight)?,
        bias: Tensor::vector(bias)?,
        out_shape,
    })
}

/// Explicit `(oc·oh·ow) × (ic·h·w)` matrix of a convolution.
pub fn conv_matrix(conv: &Conv2d, input: &TensorShape) -> Result<Matrix> {
    if conv.padding_mode != PaddingMode::Zeros {
        return Err(Error::UnsupportedPadding(
            format!("{:?}", conv.padding_mode).to_lowercase(),
        ));
    }
    let g = conv_geometry(input, conv).map_err(Error::Shape)?;
    let k = conv.kernel.data();
    let mut m = Matrix::zeros(g.out_channels * g.out_h * g.out_w, input.numel());
    for oc in 0..g.out_channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (oc * g.out_h + oy) * g.out_w + ox;
                for ic in 0..g.in_channels {
                    for ky in 0..g.kh {
                        let py = (oy * conv.stride[0] + ky) as isize - conv.padding[0] as isize;
                        let Some(iy) = conv_source(py, g.in_h, conv.padding_mode) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let px = (ox * conv.stride[1] + kx) as isize - conv.padding[1] as isize;
                            let Some(ix) = conv_source(px, g.in_w, conv.padding_mode) else {
                                continue;
                            };
                            let col = (ic * g.in_h + iy) * g.in_w + ix;
                            let kv = k[((oc * g.in_channels + ic) * g.kh + ky) * g.kw + kx];
                            m.set(row, col, m.get(row, col) + kv);
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Replaces every Conv2d by an equivalent dense Linear node.
pub fn lower_conv(graph: &Graph) -> Result<Graph> {
    rebuild(graph, |nodes, src, inputs| {
        let node = graph.node(src);
        let NodeKind::Conv2d(conv) = &node.kind else {
            return Ok(None);
        };
        let in_shape = graph.shape(graph.node(src).inputs[0]).expect("valid graph");
        let out_shape = graph.shape(src).expect("valid graph").clone();
        let m = conv_matrix(conv, in_shape)?;
        let per_channel = out_shape.numel() / conv.bias.numel();
        let bias = conv
            .bias
            .data()
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, per_channel))
            .collect();
        let kind = linear_kind(m, bias, Some(out_shape))?;
        Ok(Some(push(nodes, node.name.clone(), kind, inputs.to_vec())))
    })
}

fn gather(n_in: usize, picks: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(picks.len(), n_in);
    for (r, &c) in picks.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

/// Replaces every MaxPool by balanced trees of `r + relu(t − r)`.
///
/// Each tree level gathers the left and right members of every pair with
/// two selector Linear nodes, then applies one Sub, one ReLU and one Add to
/// all pairs at once. An odd member at a level is paired with itself, which
/// forwards it unchanged (`max(t, t) = t`) and contributes a zero-width ReLU
/// interval. Windows of size one reduce to a single gather.
pub fn lower_maxpool(graph: &Graph) -> Result<Graph> {
    rebuild(graph, |nodes, src, inputs| {
        let node = graph.node(src);
        let NodeKind::MaxPool(pool) = &node.kind else {
            return Ok(None);
        };
        let in_shape = graph.shape(graph.node(src).inputs[0]).expect("valid graph");
        let (out_shape, windows) = pool_windows(in_shape, pool).map_err(Error::Shape)?;
        let out_n = windows.len();

        // Candidate positions (in the current vector) for each output.
        let mut cands: Vec<Vec<usize>> = windows;
        let mut current = inputs[0];
        let mut current_len = in_shape.numel();
        let mut level = 0;

        if cands.iter().all(|c| c.len() == 1) {
            let picks: Vec<usize> = cands.iter().map(|c| c[0]).collect();
            let kind = linear_kind(
                gather(current_len, &picks),
                vec![0.0; out_n],
                Some(out_shape),
            )?;
            let id = push(nodes, node.name.clone(), kind, vec![current]);
            return Ok(Some(id));
        }

        loop {
            let mut left = Vec::new();
            let mut right = Vec::new();
            let mut next: Vec<Vec<usize>> = Vec::with_capacity(out_n);
            for c in &cands {
                let mut members = Vec::with_capacity(c.len().div_ceil(2));
                for pair in c.chunks(2) {
                    members.push(left.len());
                    left.push(pair[0]);
                    right.push(*pair.get(1).unwrap_or(&pair[0]));
                }
                next.push(members);
            }
            let last = next.iter().all(|c| c.len() == 1);
            let shape = last.then(|| out_shape.clone());
            let n_pairs = left.len();
            let name = |part: &str| format!("{}/l{level}/{part}", node.name);
            let l = push(
                nodes,
                name("left"),
                linear_kind(
                    gather(current_len, &left),
                    vec![0.0; n_pairs],
                    shape.clone(),
                )?,
                vec![current],
            );
            let r = push(
                nodes,
                name("right"),
                linear_kind(gather(current_len, &right), vec![0.0; n_pairs], shape)?,
                vec![current],
            );
            let diff = push(nodes, name("sub"), NodeKind::Sub, vec![l, r]);
            let relu = push(nodes, name("relu"), NodeKind::Relu, vec![diff]);
            let top = if last { node.name.clone() } else { name("max") };
            current = push(nodes, top, NodeKind::Add, vec![r, relu]);
            current_len = n_pairs;
            cands = next;
            level += 1;
            if last {
                return Ok(Some(current));
            }
        }
    })
}

/// Lowers convolutions then max-pooling.
pub fn lower(graph: &Graph) -> Result<Graph> {
    if graph.is_lowered() {
        graph.ensure_valid()?;
        return Ok(graph.clone());
    }
    lower_maxpool(&lower_conv(graph)?)
}

/// Appends a one-hot selector so that the output is the scalar `channel`.
pub fn select_output(graph: &Graph, channel: usize) -> Result<Graph> {
    graph.ensure_valid()?;
    let dim = graph.output_dim();
    if channel >= dim {
        return Err(Error::IndexOutOfRange {
            index: channel,
            len: dim,
        });
    }
    let mut nodes = graph.nodes().to_vec();
    let out = graph.output();
    let feed = nodes[out.0].inputs[0];
    let mut w = Matrix::zeros(1, dim);
    w.set(0, channel, 1.0);
    let base = format!("select_{channel}");
    let name = (0..)
        .map(|i| {
            if i == 0 {
                base.clone()
            } else {
                format!("{base}_{i}")
            }
        })
        .find(|n| nodes.iter().all(|node| &node.name != n))
        .expect("unbounded suffixes");
    let selector = push(
        &mut nodes,
        name,
        linear_kind(w, vec![0.0], None)?,
        vec![feed],
    );
    nodes[out.0].inputs = vec![selector];
    let g = Graph::new(nodes, graph.input(), out)?.with_dtype(graph.dtype());
    g.ensure_valid()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, MaxPool};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn count(g: &Graph, pred: impl Fn(&NodeKind) -> bool) -> usize {
        g.nodes().iter().filter(|n| pred(&n.kind)).count()
    }

    fn pool_graph(n: usize, window: usize) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[n]);
        let p = b.maxpool(x, MaxPool::new(vec![window]));
        b.output(p);
        b.build_valid().unwrap()
    }

    #[test]
    fn two_element_max_identity() {
        // max(3, 5) = 5 + relu(3 - 5)
        let g = pool_graph(2, 2);
        let low = lower_maxpool(&g).unwrap();
        let y = low
            .forward(&Tensor::vector(vec![3.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(count(&low, |k| matches!(k, NodeKind::Sub)), 1);
        assert_eq!(count(&low, |k| matches!(k, NodeKind::Relu)), 1);
        assert_eq!(count(&low, |k| matches!(k, NodeKind::Add)), 1);
    }

    #[test]
    fn pool_2x2_lowered() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1, 2, 2]);
        let p = b.maxpool(x, MaxPool::new(vec![2, 2]));
        b.output(p);
        let g = b.build_valid().unwrap();
        let low = lower_maxpool(&g).unwrap();
        assert_eq!(count(&low, |k| matches!(k, NodeKind::MaxPool(_))), 0);
        let x = Tensor::new(
            TensorShape::new(vec![1, 2, 2]).unwrap(),
            vec![1.0, 4.0, 2.0, 3.0],
        )
        .unwrap();
        let y = low.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(y.shape().dims(), &[1, 1, 1]);
    }

    #[test]
    fn random_eight_window_matches_max() {
        let g = pool_graph(8, 8);
        let low = lower_maxpool(&g).unwrap();
        // balanced: depth three
        assert_eq!(count(&low, |k| matches!(k, NodeKind::Relu)), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let want = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = low.forward(&Tensor::vector(v).unwrap()).unwrap().data()[0];
            assert!(
                (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn odd_windows() {
        for w in [1, 3, 5, 7, 9] {
            let g = pool_graph(w * 2, w);
            let low = lower(&g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
            for _ in 0..50 {
                let v: Vec<f64> = (0..2 * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let x = Tensor::vector(v).unwrap();
                let a = g.forward(&x).unwrap();
                let b = low.forward(&x).unwrap();
                for (p, q) in a.data().iter().zip(b.data()) {
                    assert!((p - q).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn conv_ones_kernel_matrix() {
        let conv = Conv2d {
            kernel: Tensor::new(TensorShape::new(vec![1, 1, 2, 2]).unwrap(), vec![1.0; 4]).unwrap(),
            bias: Tensor::vector(vec![0.0]).unwrap(),
            stride: [1, 1],
            padding: [0, 0],
            padding_mode: PaddingMode::Zeros,
        };
        let m = conv_matrix(&conv, &TensorShape::new(vec![1, 3, 3]).unwrap()).unwrap();
        assert_eq!(m.shape(), (4, 9));
        // sliding-window enumeration: output (oy, ox) covers rows oy..oy+2, cols ox..ox+2
        for oy in 0..2 {
            for ox in 0..2 {
                let row = oy * 2 + ox;
                let mut want = [0.0; 9];
                for dy in 0..2 {
                    for dx in 0..2 {
                        want[(oy + dy) * 3 + ox + dx] = 1.0;
                    }
                }
                assert_eq!(m.row(row), &want[..]);
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let conv = Conv2d {
            kernel: Tensor::new(TensorShape::new(vec![1, 1, 1, 1]).unwrap(), vec![1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0]).unwrap(),
            stride: [1, 1],
            padding: [0, 0],
            padding_mode: PaddingMode::Zeros,
        };
        let m = conv_matrix(&conv, &TensorShape::new(vec![1, 3, 3]).unwrap()).unwrap();
        assert_eq!(m, Matrix::identity(9));
    }

    #[test]
    fn reflect_padding_unsupported_for_lowering() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1, 3, 3]);
        let c = b.conv2d(
            x,
            Conv2d {
                kernel: Tensor::new(TensorShape::new(vec![1, 1, 3, 3]).unwrap(), vec![0.1; 9])
                    .unwrap(),
                bias: Tensor::vector(vec![0.0]).unwrap(),
                stride: [1, 1],
                padding: [1, 1],
                padding_mode: PaddingMode::Reflect,
            },
        );
        b.output(c);
        let g = b.build_valid().unwrap();
        assert!(matches!(lower_conv(&g), Err(Error::UnsupportedPadding(_))));
    }

    #[test]
    fn select_output_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_vec(10, 4, (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut b = GraphBuilder::new();
        let x = b.input(&[4]);
        let y = b.linear(x, w, vec![0.1; 10]);
        b.output(y);
        let g = b.build_valid().unwrap();
        let s = select_output(&g, 3).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        assert_eq!(
            s.forward(&x).unwrap().data(),
            &[g.forward(&x).unwrap().data()[3]]
        );
        assert!(matches!(
            select_output(&g, 12),
            Err(Error::IndexOutOfRange { index: 12, len: 10 })
        ));

        let scalar = select_output(&g, 0).unwrap();
        let again = select_output(&scalar, 0).unwrap();
        assert_eq!(again.forward(&x).unwrap(), scalar.forward(&x).unwrap());
    }
}
