//! Reverse-mode differentiation over matrix operations.
//!
//! A [`Tape`] records every operation with its value. [`Tape::backward`]
//! walks the records in reverse, accumulating adjoints. Besides the
//! propagation operations of [`Backend`], the tape carries the few extra
//! operations needed for a batched forward pass and cross-entropy loss.

use std::collections::BTreeMap;

use crate::backend::{hull_columns, scale_cols, sign, Backend};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NodeKind};
use crate::matrix::Matrix;
use crate::relax::relu_hull_partials;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    PosPart(Var),
    NegPart(Var),
    ScaleCols(Var, Var),
    MatVec(Var, Var),
    AbsRowSum(Var),
    Scale(Var, f64),
    ReluHull {
        l: Var,
        u: Var,
        which: usize,
    },
    AddToColumn {
        m: Var,
        beta: Var,
        col: usize,
        coef: f64,
    },
    Sum(Var),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Record {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the variable does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zeros of `shape` if it had no influence.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.records.push(Record { value, op });
        Var(self.records.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn get(&self, v: Var) -> &Matrix {
        &self.records[v.0].value
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.get(a).matmul_nt(self.get(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    /// Adds row vector `row` (1 × n) to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let r = self.get(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut out = self.get(m).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(m, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.get(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Mean softmax cross-entropy of the rows of `logits` against `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.get(logits);
        assert_eq!(z.rows(), labels.len(), "one label per row");
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - max).exp() / denom;
            }
            loss -= (row[y] - max) - denom.ln();
        }
        loss /= labels.len() as f64;
        self.push(
            Matrix::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Adjoints of every recorded variable with respect to the `1 × 1`
    /// variable `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.get(root).shape(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let rec = &self.records[i];
            match &rec.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.matmul_nt(self.get(*b)));
                    acc(&mut grads, *b, self.get(*a).matmul_tn(&g));
                }
                Op::MatMulNt(a, b) => {
                    acc(&mut grads, *a, g.matmul(self.get(*b)));
                    acc(&mut grads, *b, g.matmul_tn(self.get(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Neg(a) => acc(&mut grads, *a, g.map(|x| -x)),
                Op::PosPart(a) | Op::Relu(a) => {
                    let m = g.zip_map(self.get(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, m);
                }
                Op::NegPart(a) => {
                    let m = g.zip_map(self.get(*a), |g, x| if x < 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, m);
                }
                Op::ScaleCols(m, v) => {
                    let mv = self.get(*m);
                    let mut dv = Matrix::zeros(mv.cols(), 1);
                    for r in 0..mv.rows() {
                        for (c, (gx, x)) in g.row(r).iter().zip(mv.row(r)).enumerate() {
                            dv.data_mut()[c] += gx * x;
                        }
                    }
                    acc(&mut grads, *m, scale_cols(&g, self.get(*v)));
                    acc(&mut grads, *v, dv);
                }
                Op::MatVec(m, v) => {
                    let vv = self.get(*v);
                    let mut dm = Matrix::zeros(g.rows(), vv.rows());
                    for r in 0..g.rows() {
                        let gr = g.data()[r];
                        for (o, x) in dm.row_mut(r).iter_mut().zip(vv.data()) {
                            *o = gr * x;
                        }
                    }
                    acc(&mut grads, *v, self.get(*m).matmul_tn(&g));
                    acc(&mut grads, *m, dm);
                }
                Op::AbsRowSum(m) => {
                    let mv = self.get(*m);
                    let mut dm = mv.map(sign);
                    for r in 0..dm.rows() {
                        let gr = g.data()[r];
                        for o in dm.row_mut(r) {
                            *o *= gr;
                        }
                    }
                    acc(&mut grads, *m, dm);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::ReluHull { l, u, which } => {
                    let (lv, uv) = (self.get(*l), self.get(*u));
                    let n = lv.rows();
                    let mut dl = Matrix::zeros(n, 1);
                    let mut du = Matrix::zeros(n, 1);
                    for k in 0..n {
                        let p = relu_hull_partials(lv.data()[k], uv.data()[k])[*which];
                        dl.data_mut()[k] = g.data()[k] * p[0];
                        du.data_mut()[k] = g.data()[k] * p[1];
                    }
                    acc(&mut grads, *l, dl);
                    acc(&mut grads, *u, du);
                }
                Op::AddToColumn { m, beta, col, coef } => {
                    let s: f64 = (0..g.rows()).map(|r| g.get(r, *col)).sum();
                    acc(&mut grads, *beta, Matrix::scalar(coef * s));
                    acc(&mut grads, *m, g.clone());
                }
                Op::Sum(a) => {
                    let (r, c) = self.get(*a).shape();
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_vec(r, c, vec![g.item(); r * c]),
                    );
                }
                Op::AddRow(m, row) => {
                    let mut drow = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in drow.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, drow);
                    acc(&mut grads, *m, g.clone());
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.item() / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = d.get(r, y);
                        d.set(r, y, v - 1.0);
                    }
                    acc(&mut grads, *logits, d.scaled(scale));
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

/// Batched forward pass of a lowered graph on the tape. Rows of `x` are
/// samples; `weights` and `biases` (as `1 × out` rows) are keyed by Linear
/// node.
pub(crate) fn forward_batch(
    t: &mut Tape,
    graph: &Graph,
    weights: &BTreeMap<NodeId, Var>,
    biases: &BTreeMap<NodeId, Var>,
    x: Var,
) -> Result<Var> {
    let mut values: Vec<Option<Var>> = vec![None; graph.len()];
    for &id in graph.topo() {
        let node = graph.node(id);
        let arg = |k: usize| values[node.inputs[k].0].expect("topological order");
        let v = match &node.kind {
            NodeKind::Input { .. } => x,
            NodeKind::Linear { .. } => {
                let z = t.matmul_nt(arg(0), weights[&id]);
                t.add_row(z, biases[&id])
            }
            NodeKind::Relu => t.relu(arg(0)),
            NodeKind::Add => t.add(&arg(0), &arg(1)),
            NodeKind::Sub => t.sub(&arg(0), &arg(1)),
            NodeKind::Output => arg(0),
            NodeKind::Conv2d(_) | NodeKind::MaxPool(_) => {
                return Err(Error::NotLowered(id, node.kind.name()));
            }
        };
        values[id.0] = Some(v);
    }
    Ok(values[graph.output().0].expect("output evaluated"))
}

impl Backend for Tape {
    type M = Var;

    fn constant(&mut self, m: Matrix) -> Var {
        self.leaf(m)
    }

    fn value<'a>(&'a self, m: &'a Var) -> &'a Matrix {
        self.get(*m)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.get(*a).matmul(self.get(*b));
        self.push(v, Op::MatMul(*a, *b))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let mut v = self.get(*a).clone();
        v.add_assign(self.get(*b));
        self.push(v, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.get(*a).zip_map(self.get(*b), |x, y| x - y);
        self.push(v, Op::Sub(*a, *b))
    }

    fn neg(&mut self, a: &Var) -> Var {
        let v = self.get(*a).map(|x| -x);
        self.push(v, Op::Neg(*a))
    }

    fn pos_part(&mut self, a: &Var) -> Var {
        let v = self.get(*a).map(|x| x.max(0.0));
        self.push(v, Op::PosPart(*a))
    }

    fn neg_part(&mut self, a: &Var) -> Var {
        let v = self.get(*a).map(|x| x.min(0.0));
        self.push(v, Op::NegPart(*a))
    }

    fn scale_cols(&mut self, m: &Var, v: &Var) -> Var {
        let out = scale_cols(self.get(*m), self.get(*v));
        self.push(out, Op::ScaleCols(*m, *v))
    }

    fn matvec(&mut self, m: &Var, v: &Var) -> Var {
        let out = self.get(*m).matmul(self.get(*v));
        self.push(out, Op::MatVec(*m, *v))
    }

    fn abs_row_sum(&mut self, m: &Var) -> Var {
        let out = self.get(*m).abs_row_sums();
        self.push(out, Op::AbsRowSum(*m))
    }

    fn scale(&mut self, m: &Var, s: f64) -> Var {
        let out = self.get(*m).scaled(s);
        self.push(out, Op::Scale(*m, s))
    }

    fn relu_hull(&mut self, l: &Var, u: &Var) -> [Var; 4] {
        let cols = hull_columns(self.get(*l), self.get(*u));
        let mut which = 0;
        cols.map(|c| {
            let v = self.push(
                c,
                Op::ReluHull {
                    l: *l,
                    u: *u,
                    which,
                },
            );
            which += 1;
            v
        })
    }

    fn add_to_column(&mut self, m: &Var, beta: &Var, col: usize, coef: f64) -> Var {
        let b = self.get(*beta).item();
        let mut out = self.get(*m).clone();
        for r in 0..out.rows() {
            let v = out.get(r, col);
            out.set(r, col, v + coef * b);
        }
        self.push(
            out,
            Op::AddToColumn {
                m: *m,
                beta: *beta,
                col,
                coef,
            },
        )
    }

    fn sum(&mut self, m: &Var) -> Var {
        let s = self.get(*m).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(*m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let g = t.backward(y).get_or_zeros(x, x0.shape());
        let h = 1e-6;
        for i in 0..x0.data().len() {
            let eval = |d: f64| {
                let mut xm = x0.clone();
                xm.data_mut()[i] += d;
                let mut t = Tape::new();
                let x = t.leaf(xm);
                let y = build(&mut t, x);
                t.get(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let w = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.7, 0.4], vec![-0.5, 2.0]]);
        fd_check(
            move |t, x| {
                let c = t.constant(w.clone());
                let y = t.matmul(&x, &c);
                let y = t.pos_part(&y);
                let r = t.abs_row_sum(&y);
                t.sum(&r)
            },
            Matrix::from_rows(&[vec![1.0, -0.5, 0.25], vec![-0.3, 0.8, 1.1]]),
        );
    }

    #[test]
    fn scale_cols_matvec_gradient() {
        fd_check(
            |t, x| {
                let m = t.constant(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
                let s = t.scale_cols(&m, &x);
                let v = t.matvec(&s, &x);
                let n = t.neg_part(&v);
                let q = t.scale(&n, 3.0);
                let r = t.sub(&q, &v);
                t.sum(&r)
            },
            Matrix::column(vec![0.7, -0.9]),
        );
    }

    #[test]
    fn hull_gradient() {
        fd_check(
            |t, x| {
                let l = t.neg(&x);
                let u = t.scale(&x, 2.0);
                let [a, b, c, d] = t.relu_hull(&l, &u);
                let s1 = t.add(&a, &b);
                let s2 = t.add(&c, &d);
                let s1 = t.scale(&s1, 3.0);
                let s = t.sub(&s1, &s2);
                t.sum(&s)
            },
            Matrix::column(vec![0.4, 1.5]),
        );
    }

    #[test]
    fn softmax_xent_gradient() {
        fd_check(
            |t, x| {
                let w = t.constant(Matrix::from_rows(&[
                    vec![0.2, -0.1],
                    vec![0.4, 0.3],
                    vec![-0.6, 0.9],
                ]));
                let z = t.matmul_nt(x, w);
                let b = t.constant(Matrix::from_rows(&[vec![0.1, 0.0, -0.1]]));
                let z = t.add_row(z, b);
                let z = t.relu(z);
                t.softmax_xent(z, &[2, 0])
            },
            Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3]]),
        );
    }

    #[test]
    fn add_to_column_gradient() {
        fd_check(
            |t, beta| {
                let m = t.constant(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.1]]));
                let m = t.add_to_column(&m, &beta, 1, -1.0);
                let r = t.abs_row_sum(&m);
                t.sum(&r)
            },
            Matrix::scalar(0.3),
        );
    }
}
