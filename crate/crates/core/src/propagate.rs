//! Backward substitution of linear bounds on state distances.
//!
//! A bound on the distance of a target node is a linear form over a frontier
//! of earlier nodes. Nodes are eliminated latest-first in topological order
//! until only the input perturbation remains, which the L∞ ball then turns
//! into a concrete interval. The same routine runs eagerly for certification
//! and on a [`Tape`](crate::tape::Tape) for training and β optimization.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NodeKind};
use crate::lower::lower;
use crate::matrix::Matrix;
use crate::relax::{relax_relu, BranchSign, Coeff, IntervalBound, LayerRelaxation};

/// `Σ_i A_i Δx_i + offset` over the frontier nodes `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearForm {
    pub coeffs: BTreeMap<NodeId, Matrix>,
    pub offset: Vec<f64>,
}

impl LinearForm {
    pub fn identity(target: NodeId, dim: usize) -> Self {
        Self {
            coeffs: BTreeMap::from([(target, Matrix::identity(dim))]),
            offset: vec![0.0; dim],
        }
    }

    /// Evaluates the form on per-node distances.
    pub fn eval(&self, distances: &BTreeMap<NodeId, Vec<f64>>) -> Vec<f64> {
        let mut out = self.offset.clone();
        for (id, a) in &self.coeffs {
            let dx = &distances[id];
            for (r, o) in out.iter_mut().enumerate() {
                *o += crate::matrix::dot(a.row(r), dx);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsPair {
    pub lower: LinearForm,
    pub upper: LinearForm,
}

impl BoundsPair {
    pub fn identity(target: NodeId, dim: usize) -> Self {
        Self {
            lower: LinearForm::identity(target, dim),
            upper: LinearForm::identity(target, dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcreteBounds {
    pub lo: f64,
    pub hi: f64,
    pub delta: f64,
}

impl ConcreteBounds {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn magnitude(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        self.lo - tol <= v && v <= self.hi + tol
    }
}

/// Lagrangian term `β·S·Δx_j[neuron]` for a sign constraint on the
/// distance of node `node`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchTerm {
    pub node: NodeId,
    pub neuron: usize,
    pub sign: BranchSign,
    pub beta: f64,
}

// ---------------------------------------------------------------------------
// Backend-generic core

/// A branch term with separate multipliers for the two bounds.
pub(crate) struct Multiplier<M> {
    pub node: NodeId,
    pub neuron: usize,
    pub sign: f64,
    pub lower: M,
    pub upper: M,
}

/// Intermediate state of a substitution.
pub(crate) struct Frontier<M> {
    pub coeffs: BTreeMap<NodeId, (M, M)>,
    pub b: M,
    pub d: M,
}

/// Final bounds over the input: `A Δx + b ≤ y ≤ C Δx + d`, with `b`, `d`
/// column vectors.
pub(crate) struct InputBounds<M> {
    pub a: M,
    pub b: M,
    pub c: M,
    pub d: M,
}

pub(crate) type Observer<'a, M> = &'a mut dyn FnMut(&Frontier<M>);

pub(crate) fn eager_weights(
    graph: &Graph,
    be: &mut Eager,
) -> BTreeMap<NodeId, <Eager as Backend>::M> {
    graph
        .linear_nodes()
        .into_iter()
        .map(|id| {
            (
                id,
                be.constant(graph.linear_weight(id).expect("linear node")),
            )
        })
        .collect()
}

fn accumulate<B: Backend>(
    be: &mut B,
    coeffs: &mut BTreeMap<NodeId, (B::M, B::M)>,
    id: NodeId,
    a: B::M,
    c: B::M,
) {
    match coeffs.remove(&id) {
        Some((a0, c0)) => {
            let a = be.add(&a0, &a);
            let c = be.add(&c0, &c);
            coeffs.insert(id, (a, c));
        }
        None => {
            coeffs.insert(id, (a, c));
        }
    }
}

/// Eliminates frontier nodes of `graph` from the bounds `init · Δx_target`
/// until only the input remains. `relus` maps each ReLU node to its hull
/// columns (lower slope, lower offset, upper slope, upper offset).
pub(crate) fn substitute<B: Backend>(
    be: &mut B,
    graph: &Graph,
    weights: &BTreeMap<NodeId, B::M>,
    relus: &BTreeMap<NodeId, [B::M; 4]>,
    target: NodeId,
    init: Matrix,
    multipliers: &[Multiplier<B::M>],
    mut observe: Option<Observer<'_, B::M>>,
) -> Result<InputBounds<B::M>> {
    graph.ensure_lowered()?;
    let rows = init.rows();
    let init = be.constant(init);
    let zero = be.constant(Matrix::zeros(rows, 1));
    let mut state = Frontier {
        coeffs: BTreeMap::from([(target, (init.clone(), init))]),
        b: zero.clone(),
        d: zero,
    };
    if let Some(f) = observe.as_mut() {
        f(&state);
    }
    let order = graph.topo();
    let start = order
        .iter()
        .position(|&id| id == target)
        .ok_or(Error::Unreachable(target))?;
    for &id in order[..=start].iter().rev() {
        let Some((mut a, mut c)) = state.coeffs.remove(&id) else {
            continue;
        };
        for m in multipliers.iter().filter(|m| m.node == id) {
            a = be.add_to_column(&a, &m.lower, m.neuron, m.sign);
            c = be.add_to_column(&c, &m.upper, m.neuron, -m.sign);
        }
        let node = graph.node(id);
        match &node.kind {
            NodeKind::Input { .. } => {
                if !state.coeffs.is_empty() {
                    let stray = *state.coeffs.keys().next().expect("nonempty");
                    return Err(Error::Unreachable(stray));
                }
                return Ok(InputBounds {
                    a,
                    b: state.b,
                    c,
                    d: state.d,
                });
            }
            NodeKind::Linear { .. } => {
                let w = &weights[&id];
                let aw = be.matmul(&a, w);
                let cw = be.matmul(&c, w);
                accumulate(be, &mut state.coeffs, node.inputs[0], aw, cw);
            }
            NodeKind::Relu => {
                let [ls, lo, us, uo] = relus.get(&id).ok_or(Error::MissingRelaxation(id))?;
                let (ap, an) = (be.pos_part(&a), be.neg_part(&a));
                let (cp, cn) = (be.pos_part(&c), be.neg_part(&c));
                let t1 = be.scale_cols(&ap, ls);
                let t2 = be.scale_cols(&an, us);
                let aj = be.add(&t1, &t2);
                let t1 = be.scale_cols(&cp, us);
                let t2 = be.scale_cols(&cn, ls);
                let cj = be.add(&t1, &t2);
                let t1 = be.matvec(&ap, lo);
                let t2 = be.matvec(&an, uo);
                let db = be.add(&t1, &t2);
                state.b = be.add(&state.b, &db);
                let t1 = be.matvec(&cp, uo);
                let t2 = be.matvec(&cn, lo);
                let dd = be.add(&t1, &t2);
                state.d = be.add(&state.d, &dd);
                accumulate(be, &mut state.coeffs, node.inputs[0], aj, cj);
            }
            NodeKind::Add => {
                accumulate(be, &mut state.coeffs, node.inputs[0], a.clone(), c.clone());
                accumulate(be, &mut state.coeffs, node.inputs[1], a, c);
            }
            NodeKind::Sub => {
                let (na, nc) = (be.neg(&a), be.neg(&c));
                accumulate(be, &mut state.coeffs, node.inputs[0], a, c);
                accumulate(be, &mut state.coeffs, node.inputs[1], na, nc);
            }
            NodeKind::Output => {
                accumulate(be, &mut state.coeffs, node.inputs[0], a, c);
            }
            NodeKind::Conv2d(_) | NodeKind::MaxPool(_) => {
                return Err(Error::NotLowered(id, node.kind.name()));
            }
        }
        if let Some(f) = observe.as_mut() {
            f(&state);
        }
    }
    Err(Error::Unreachable(target))
}

/// `(−‖A‖₁δ + b, ‖C‖₁δ + d)` as column vectors.
pub(crate) fn concretize_with<B: Backend>(
    be: &mut B,
    bounds: &InputBounds<B::M>,
    delta: f64,
) -> (B::M, B::M) {
    let na = be.abs_row_sum(&bounds.a);
    let nc = be.abs_row_sum(&bounds.c);
    let na = be.scale(&na, -delta);
    let nc = be.scale(&nc, delta);
    (be.add(&na, &bounds.b), be.add(&nc, &bounds.d))
}

/// Input-distance intervals and hull columns of every ReLU, in topological
/// order. With `detach`, interval values enter the hulls as constants.
pub(crate) fn relu_hulls<B: Backend>(
    be: &mut B,
    graph: &Graph,
    weights: &BTreeMap<NodeId, B::M>,
    delta: f64,
    detach: bool,
) -> Result<(BTreeMap<NodeId, (B::M, B::M)>, BTreeMap<NodeId, [B::M; 4]>)> {
    let mut intervals = BTreeMap::new();
    let mut hulls = BTreeMap::new();
    for relu in graph.relu_nodes() {
        let src = graph.node(relu).inputs[0];
        let n = graph.numel(src);
        let bounds = substitute(
            be,
            graph,
            weights,
            &hulls,
            src,
            Matrix::identity(n),
            &[],
            None,
        )?;
        let (mut l, mut u) = concretize_with(be, &bounds, delta);
        if detach {
            l = be.constant(be.value(&l).clone());
            u = be.constant(be.value(&u).clone());
        }
        hulls.insert(relu, be.relu_hull(&l, &u));
        intervals.insert(relu, (l, u));
    }
    Ok((intervals, hulls))
}

// ---------------------------------------------------------------------------
// Plain API

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation radius must be finite and nonnegative, got {delta}"
        )));
    }
    Ok(())
}

fn relaxation_columns(
    be: &mut Eager,
    id: NodeId,
    n: usize,
    r: &LayerRelaxation,
) -> Result<[<Eager as Backend>::M; 4]> {
    let diag = |c: &Coeff| -> Result<Vec<f64>> {
        match c {
            Coeff::Diagonal(d) if d.len() == n => Ok(d.clone()),
            Coeff::Scalar(s) => Ok(vec![*s; n]),
            _ => Err(Error::Shape(format!(
                "ReLU relaxation of {id} must be diagonal with {n} entries"
            ))),
        }
    };
    let offset = |v: &[f64]| -> Result<Vec<f64>> {
        if v.len() == n {
            Ok(v.to_vec())
        } else {
            Err(Error::Shape(format!(
                "ReLU relaxation of {id} has {} offsets, expected {n}",
                v.len()
            )))
        }
    };
    Ok([
        be.constant(Matrix::column(diag(&r.lower.coeff_j)?)),
        be.constant(Matrix::column(offset(&r.lower.offset)?)),
        be.constant(Matrix::column(diag(&r.upper.coeff_j)?)),
        be.constant(Matrix::column(offset(&r.upper.offset)?)),
    ])
}

fn to_form(coeffs: impl Iterator<Item = (NodeId, Matrix)>, offset: &Matrix) -> LinearForm {
    LinearForm {
        coeffs: coeffs.collect(),
        offset: offset.data().to_vec(),
    }
}

fn frontier_to_pair(f: &Frontier<<Eager as Backend>::M>) -> BoundsPair {
    BoundsPair {
        lower: to_form(
            f.coeffs.iter().map(|(id, (a, _))| (*id, (**a).clone())),
            &f.b,
        ),
        upper: to_form(
            f.coeffs.iter().map(|(id, (_, c))| (*id, (**c).clone())),
            &f.d,
        ),
    }
}

fn run_substitution(
    graph: &Graph,
    relaxations: &BTreeMap<NodeId, LayerRelaxation>,
    target: NodeId,
    branch_terms: &[BranchTerm],
    observe: Option<Observer<'_, <Eager as Backend>::M>>,
) -> Result<BoundsPair> {
    graph.ensure_valid()?;
    let mut be = Eager::new();
    let weights = eager_weights(graph, &mut be);
    let mut hulls = BTreeMap::new();
    for (&id, r) in relaxations {
        if matches!(graph.node(id).kind, NodeKind::Relu) {
            let cols = relaxation_columns(&mut be, id, graph.numel(id), r)?;
            hulls.insert(id, cols);
        }
    }
    let mut multipliers = Vec::with_capacity(branch_terms.len());
    for t in branch_terms {
        if t.beta < 0.0 || !t.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "β must be nonnegative, got {}",
                t.beta
            )));
        }
        let n = graph.numel(t.node);
        if t.neuron >= n {
            return Err(Error::IndexOutOfRange {
                index: t.neuron,
                len: n,
            });
        }
        let beta = be.constant(Matrix::scalar(t.beta));
        multipliers.push(Multiplier {
            node: t.node,
            neuron: t.neuron,
            sign: t.sign.lagrange_sign(),
            lower: beta.clone(),
            upper: beta,
        });
    }
    let dim = graph.numel(target);
    let out = substitute(
        &mut be,
        graph,
        &weights,
        &hulls,
        target,
        Matrix::identity(dim),
        &multipliers,
        observe,
    )?;
    let input = graph.input();
    Ok(BoundsPair {
        lower: to_form(std::iter::once((input, (*out.a).clone())), &out.b),
        upper: to_form(std::iter::once((input, (*out.c).clone())), &out.d),
    })
}

/// Linear bounds on `Δx_target` over the input perturbation. `relaxations`
/// is keyed by ReLU node; Linear, Add and Sub layers are handled exactly.
pub fn backward_substitute(
    graph: &Graph,
    relaxations: &BTreeMap<NodeId, LayerRelaxation>,
    target: NodeId,
    branch_terms: &[BranchTerm],
) -> Result<BoundsPair> {
    run_substitution(graph, relaxations, target, branch_terms, None)
}

/// Like [`backward_substitute`], also returning the bounds after every
/// elimination step, starting with the identity on `target`.
pub fn backward_substitute_traced(
    graph: &Graph,
    relaxations: &BTreeMap<NodeId, LayerRelaxation>,
    target: NodeId,
    branch_terms: &[BranchTerm],
) -> Result<(BoundsPair, Vec<BoundsPair>)> {
    let mut trace = Vec::new();
    let mut obs = |f: &Frontier<<Eager as Backend>::M>| trace.push(frontier_to_pair(f));
    let out = run_substitution(graph, relaxations, target, branch_terms, Some(&mut obs))?;
    Ok((out, trace))
}

/// Per-row intervals of bounds whose frontier is a single (input) node.
pub fn concretize(bounds: &BoundsPair, delta: f64) -> Result<Vec<ConcreteBounds>> {
    check_delta(delta)?;
    let single = |f: &LinearForm| -> Result<Matrix> {
        let mut it = f.coeffs.iter();
        let (first, m) = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("linear form without coefficients".into()))?;
        if let Some((extra, _)) = it.next() {
            return Err(Error::FrontierNotReduced(*extra.max(first)));
        }
        Ok(m.clone())
    };
    let a = single(&bounds.lower)?;
    let c = single(&bounds.upper)?;
    let (na, nc) = (a.abs_row_sums(), c.abs_row_sums());
    Ok((0..a.rows())
        .map(|r| ConcreteBounds {
            lo: -na.data()[r] * delta + bounds.lower.offset[r],
            hi: nc.data()[r] * delta + bounds.upper.offset[r],
            delta,
        })
        .collect())
}

fn intervals_of(graph: &Graph, delta: f64) -> Result<BTreeMap<NodeId, IntervalBound>> {
    let mut be = Eager::new();
    let weights = eager_weights(graph, &mut be);
    let (intervals, _) = relu_hulls(&mut be, graph, &weights, delta, false)?;
    intervals
        .into_iter()
        .map(|(id, (l, u))| {
            Ok((
                id,
                IntervalBound::new(l.data().to_vec(), u.data().to_vec())?,
            ))
        })
        .collect()
}

/// Interval of the input distance of every ReLU node, keyed by the ReLU.
pub fn compute_relu_input_intervals(
    graph: &Graph,
    delta: f64,
) -> Result<BTreeMap<NodeId, IntervalBound>> {
    check_delta(delta)?;
    graph.ensure_valid()?;
    graph.ensure_lowered()?;
    intervals_of(graph, delta)
}

/// Hull relaxations for the given ReLU intervals.
pub fn relu_relaxations(
    intervals: &BTreeMap<NodeId, IntervalBound>,
) -> Result<BTreeMap<NodeId, LayerRelaxation>> {
    intervals
        .iter()
        .map(|(&id, b)| Ok((id, relax_relu(b)?)))
        .collect()
}

fn prepared(graph: &Graph, delta: f64) -> Result<Graph> {
    check_delta(delta)?;
    graph.ensure_valid()?;
    lower(graph)
}

pub(crate) fn channel_bounds(graph: &Graph, delta: f64) -> Result<Vec<ConcreteBounds>> {
    let mut be = Eager::new();
    let weights = eager_weights(graph, &mut be);
    let (_, hulls) = relu_hulls(&mut be, graph, &weights, delta, false)?;
    let dim = graph.output_dim();
    let out = substitute(
        &mut be,
        graph,
        &weights,
        &hulls,
        graph.output(),
        Matrix::identity(dim),
        &[],
        None,
    )?;
    let (lo, hi) = concretize_with(&mut be, &out, delta);
    Ok(lo
        .data()
        .iter()
        .zip(hi.data())
        .map(|(&lo, &hi)| ConcreteBounds { lo, hi, delta })
        .collect())
}

/// Interval containing `F(x+Δ) − F(x)` for every `x` and `‖Δ‖∞ ≤ δ`, for a
/// scalar-output graph.
pub fn output_variation_bounds(graph: &Graph, delta: f64) -> Result<ConcreteBounds> {
    let g = prepared(graph, delta)?;
    let dim = g.output_dim();
    if dim != 1 {
        return Err(Error::NonScalarOutput(dim));
    }
    Ok(channel_bounds(&g, delta)?[0])
}

/// Per-channel variation intervals of a graph with any output dimension.
pub fn output_variation_bounds_per_channel(
    graph: &Graph,
    delta: f64,
) -> Result<Vec<ConcreteBounds>> {
    let g = prepared(graph, delta)?;
    channel_bounds(&g, delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Robust,
    Unknown,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateReport {
    pub delta: f64,
    pub epsilon: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relu_intervals: Option<BTreeMap<String, IntervalBound>>,
    pub wall_time_s: f64,
}

/// Robust iff `max(|lo|, |hi|) ≤ ε` on every output channel. The converse
/// does not hold, hence `Unknown` rather than a negative verdict.
pub fn verdict(bounds: &[ConcreteBounds], epsilon: f64) -> Verdict {
    if bounds.iter().all(|b| b.magnitude() <= epsilon) {
        Verdict::Robust
    } else {
        Verdict::Unknown
    }
}

pub fn certify(
    graph: &Graph,
    delta: f64,
    epsilon: f64,
    with_intervals: bool,
) -> Result<CertificateReport> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be nonnegative, got {epsilon}"
        )));
    }
    let start = Instant::now();
    let g = prepared(graph, delta)?;
    let bounds = channel_bounds(&g, delta)?;
    let relu_intervals = if with_intervals {
        Some(
            intervals_of(&g, delta)?
                .into_iter()
                .map(|(id, b)| (g.node(id).name.clone(), b))
                .collect(),
        )
    } else {
        None
    };
    Ok(CertificateReport {
        delta,
        epsilon,
        lo: bounds.iter().map(|b| b.lo).collect(),
        hi: bounds.iter().map(|b| b.hi).collect(),
        verdict: verdict(&bounds, epsilon),
        relu_intervals,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
