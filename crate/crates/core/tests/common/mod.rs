//! Random network generators shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use globcert::graph::{
    Conv2d, Graph, GraphBuilder, MaxPool, NodeId, PaddingMode, Tensor, TensorShape,
};
use globcert::matrix::Matrix;
use rand::Rng;

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn dense(b: &mut GraphBuilder, rng: &mut impl Rng, x: NodeId, from: usize, to: usize) -> NodeId {
    let w = uniform_matrix(rng, to, from, 1.0);
    let bias = uniform_vec(rng, to, 0.5);
    b.linear(x, w, bias)
}

/// A lowered DAG with up to `max_layers` hidden blocks of at most
/// `max_width` neurons, mixing Linear+ReLU blocks with Add/Sub joins, ending
/// in `out_dim` outputs. Every intermediate value reaches the output.
pub fn random_graph(
    rng: &mut impl Rng,
    max_layers: usize,
    max_width: usize,
    out_dim: usize,
) -> Graph {
    let mut b = GraphBuilder::new();
    let d0 = rng.gen_range(1..=4);
    let x = b.input(&[d0]);
    // (value, width, consumed)
    let mut pool: Vec<(NodeId, usize, bool)> = vec![(x, d0, false)];
    let layers = rng.gen_range(1..=max_layers);
    for _ in 0..layers {
        let src = if rng.gen_bool(0.7) {
            pool.len() - 1
        } else {
            rng.gen_range(0..pool.len())
        };
        let (sv, sw, _) = pool[src];
        pool[src].2 = true;
        let w = rng.gen_range(1..=max_width);
        let lin = dense(&mut b, rng, sv, sw, w);
        let act = b.relu(lin);
        let out = if pool.len() > 1 && rng.gen_bool(0.5) {
            // Join with another value projected to the same width.
            let other = rng.gen_range(0..pool.len());
            let (ov, ow, _) = pool[other];
            pool[other].2 = true;
            let proj = dense(&mut b, rng, ov, ow, w);
            if rng.gen_bool(0.5) {
                b.add(act, proj)
            } else {
                b.sub(act, proj)
            }
        } else {
            act
        };
        pool.push((out, w, false));
    }
    let (last, lw, _) = *pool.last().expect("nonempty");
    let mut acc = dense(&mut b, rng, last, lw, out_dim);
    for &(v, w, used) in &pool[..pool.len() - 1] {
        if !used {
            let p = dense(&mut b, rng, v, w, out_dim);
            acc = b.add(acc, p);
        }
    }
    b.output(acc);
    b.build_valid().expect("generated graph validates")
}

/// Linear, Add and Sub layers only; returns the graph and the end-to-end
/// matrix computed independently by multiplying the layer matrices.
pub fn random_affine(rng: &mut impl Rng) -> (Graph, Matrix) {
    let mut b = GraphBuilder::new();
    let d0 = rng.gen_range(1..=6);
    let x = b.input(&[d0]);
    let mut cur = x;
    let mut total = Matrix::identity(d0);
    let mut width = d0;
    for _ in 0..rng.gen_range(1..=4) {
        let w = rng.gen_range(1..=8);
        let m = uniform_matrix(rng, w, width, 1.0);
        let lin = b.linear(cur, m.clone(), uniform_vec(rng, w, 0.5));
        let mut layer = m;
        if rng.gen_bool(0.3) {
            // Skip-style join: lin ± S·cur.
            let s = uniform_matrix(rng, w, width, 1.0);
            let side = b.linear(cur, s.clone(), uniform_vec(rng, w, 0.5));
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            cur = if sign > 0.0 {
                b.add(lin, side)
            } else {
                b.sub(lin, side)
            };
            layer = layer.zip_map(&s, |a, c| a + sign * c);
        } else {
            cur = lin;
        }
        total = layer.matmul(&total);
        width = w;
    }
    let last = uniform_matrix(rng, 1, width, 1.0);
    let out = b.linear(cur, last.clone(), vec![0.0]);
    b.output(out);
    (b.build_valid().unwrap(), last.matmul(&total))
}

/// Fully connected ReLU network with the given widths.
pub fn random_mlp(rng: &mut impl Rng, dims: &[usize]) -> Graph {
    let layers = dims
        .windows(2)
        .map(|w| {
            (
                uniform_matrix(rng, w[1], w[0], 1.0),
                uniform_vec(rng, w[1], 0.5),
            )
        })
        .collect();
    globcert::graph::mlp(dims[0], layers).unwrap()
}

/// Convolution and max-pooling network over a `[c, h, w]` input, with
/// pooling windows of up to 9 elements and a final dense layer.
pub fn random_conv_graph(rng: &mut impl Rng) -> Graph {
    let mut b = GraphBuilder::new();
    let c = rng.gen_range(1..=2);
    let h = rng.gen_range(4..=7);
    let w = rng.gen_range(4..=7);
    let x = b.input(&[c, h, w]);
    let oc = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let kernel = Tensor::new(
        TensorShape::new(vec![oc, c, k, k]).unwrap(),
        uniform_vec(rng, oc * c * k * k, 1.0),
    )
    .unwrap();
    let bias = Tensor::vector(uniform_vec(rng, oc, 0.5)).unwrap();
    let conv = b.conv2d(
        x,
        Conv2d {
            kernel,
            bias,
            stride: [stride, stride],
            padding: [pad, pad],
            padding_mode: PaddingMode::Zeros,
        },
    );
    let r = b.relu(conv);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let (wh, ww) = loop {
        let a = rng.gen_range(1..=oh.min(3));
        let bb = rng.gen_range(1..=ow.min(3));
        if a * bb <= 9 && a * bb >= 2 {
            break (a, bb);
        }
        if oh * ow == 1 {
            break (1, 1);
        }
    };
    let sh = rng.gen_range(1..=wh);
    let sw = rng.gen_range(1..=ww);
    let p = b.maxpool(
        r,
        MaxPool {
            window: vec![wh, ww],
            stride: vec![sh, sw],
        },
    );
    let ph = (oh - wh) / sh + 1;
    let pw = (ow - ww) / sw + 1;
    let flat = oc * ph * pw;
    // A 1-D pool with a window of up to 9 on a dense layer's output.
    let win = rng.gen_range(2..=9);
    let n = win * rng.gen_range(1..=2);
    let l = b.linear(
        p,
        uniform_matrix(rng, n, flat, 1.0),
        uniform_vec(rng, n, 0.5),
    );
    let p2 = b.maxpool(l, MaxPool::new(vec![win]));
    let out = b.linear(
        p2,
        uniform_matrix(rng, 2, n / win, 1.0),
        uniform_vec(rng, 2, 0.5),
    );
    b.output(out);
    b.build_valid().expect("generated conv graph validates")
}
