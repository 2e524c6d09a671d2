//! Branch and bound over the signs of ReLU input distances.
//!
//! Each domain constrains the sign of some `Δx_j` entries. Constrained
//! neurons use the exact triangle for their half of the butterfly, and the
//! constraint enters the bound through a Lagrangian term `β·S·Δx_j` whose
//! multiplier is tuned by projected gradient ascent. The global interval is
//! the worst case over the leaves, so it can be reported at any moment.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::lower::lower;
use crate::matrix::Matrix;
use crate::propagate::{
    compute_relu_input_intervals, concretize_with, substitute, ConcreteBounds, Multiplier,
};
use crate::relax::{branched_hull, relu_hull, BranchSign, IntervalBound};
use crate::tape::Tape;

/// Sign constraint on entry `neuron` of the distance at node `node`, which
/// feeds a ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Constraint {
    pub node: NodeId,
    pub neuron: usize,
    pub sign: BranchSign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub constraints: Vec<Constraint>,
    pub betas_lower: Vec<f64>,
    pub betas_upper: Vec<f64>,
    pub bounds: ConcreteBounds,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Largest hull area proxy `−l·u/(u−l)`.
    #[default]
    GapScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnBConfig {
    pub max_splits: usize,
    pub timeout: Option<Duration>,
    pub beta_steps: usize,
    pub beta_lr: f64,
    pub selection: Selection,
}

impl Default for BnBConfig {
    fn default() -> Self {
        Self {
            max_splits: 16,
            timeout: None,
            beta_steps: 20,
            beta_lr: 0.05,
            selection: Selection::GapScore,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub time_s: f64,
    pub splits: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnBResult {
    pub best: ConcreteBounds,
    pub history: Vec<HistoryEntry>,
    pub domains_explored: usize,
}

impl BnBResult {
    /// History as CSV with columns `time_s,splits,lo,hi`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("time_s,splits,lo,hi\n");
        for h in &self.history {
            s.push_str(&format!("{},{},{},{}\n", h.time_s, h.splits, h.lo, h.hi));
        }
        s
    }
}

/// The unconstrained unstable neuron with the largest gap score, ties broken
/// by smallest `(node, neuron)`. `None` when every unstable neuron is
/// already constrained.
pub fn select_branch_neuron(
    graph: &Graph,
    intervals: &BTreeMap<NodeId, IntervalBound>,
    constraints: &[Constraint],
) -> Option<(NodeId, usize)> {
    let taken: BTreeSet<(NodeId, usize)> = constraints.iter().map(|c| (c.node, c.neuron)).collect();
    let mut candidates: BTreeMap<(NodeId, usize), f64> = BTreeMap::new();
    for (&relu, iv) in intervals {
        let pre = graph.node(relu).inputs[0];
        for (k, (&l, &u)) in iv.lo.iter().zip(&iv.hi).enumerate() {
            if l < 0.0 && u > 0.0 && !taken.contains(&(pre, k)) {
                candidates.insert((pre, k), -l * u / (u - l));
            }
        }
    }
    let mut best: Option<((NodeId, usize), f64)> = None;
    for (key, score) in candidates {
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((key, score));
        }
    }
    best.map(|(key, _)| key)
}

/// Fixed data shared by every domain of one run.
struct Problem<'g> {
    graph: &'g Graph,
    weights: BTreeMap<NodeId, Matrix>,
    hulls: BTreeMap<NodeId, [Matrix; 4]>,
    delta: f64,
}

impl<'g> Problem<'g> {
    fn new(graph: &'g Graph, intervals: &BTreeMap<NodeId, IntervalBound>, delta: f64) -> Self {
        let weights = graph
            .linear_nodes()
            .into_iter()
            .map(|id| (id, graph.linear_weight(id).expect("linear node")))
            .collect();
        let hulls = intervals
            .iter()
            .map(|(&id, iv)| {
                let n = iv.len();
                let mut cols = [
                    Matrix::zeros(n, 1),
                    Matrix::zeros(n, 1),
                    Matrix::zeros(n, 1),
                    Matrix::zeros(n, 1),
                ];
                for k in 0..n {
                    let h = relu_hull(iv.lo[k], iv.hi[k]);
                    let vals = [h.lower.slope, h.lower.offset, h.upper.slope, h.upper.offset];
                    for (c, v) in cols.iter_mut().zip(vals) {
                        c.data_mut()[k] = v;
                    }
                }
                (id, cols)
            })
            .collect();
        Self {
            graph,
            weights,
            hulls,
            delta,
        }
    }

    /// Bounds at the given multipliers, with their gradients: `∂lo/∂β_lower`
    /// and `−∂hi/∂β_upper`.
    fn evaluate(
        &self,
        constraints: &[Constraint],
        betas_lower: &[f64],
        betas_upper: &[f64],
    ) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        let mut hulls = self.hulls.clone();
        for c in constraints {
            let h = branched_hull(c.sign);
            for (&relu, cols) in hulls.iter_mut() {
                if self.graph.node(relu).inputs[0] == c.node {
                    let vals = [h.lower.slope, h.lower.offset, h.upper.slope, h.upper.offset];
                    for (col, v) in cols.iter_mut().zip(vals) {
                        col.data_mut()[c.neuron] = v;
                    }
                }
            }
        }
        let mut t = Tape::new();
        let weights = self
            .weights
            .iter()
            .map(|(&id, w)| (id, t.constant(w.clone())))
            .collect();
        let hulls = hulls
            .into_iter()
            .map(|(id, cols)| (id, cols.map(|c| t.constant(c))))
            .collect();
        let mut vars = Vec::with_capacity(constraints.len());
        let multipliers: Vec<_> = constraints
            .iter()
            .zip(betas_lower.iter().zip(betas_upper))
            .map(|(c, (&bl, &bu))| {
                let lower = t.leaf(Matrix::scalar(bl));
                let upper = t.leaf(Matrix::scalar(bu));
                vars.push((lower, upper));
                Multiplier {
                    node: c.node,
                    neuron: c.neuron,
                    sign: c.sign.lagrange_sign(),
                    lower,
                    upper,
                }
            })
            .collect();
        let out = self.graph.output();
        let bounds = substitute(
            &mut t,
            self.graph,
            &weights,
            &hulls,
            out,
            Matrix::identity(1),
            &multipliers,
            None,
        )?;
        let (lo, hi) = concretize_with(&mut t, &bounds, self.delta);
        let (lo_v, hi_v) = (t.get(lo).item(), t.get(hi).item());
        if constraints.is_empty() {
            return Ok((lo_v, hi_v, Vec::new(), Vec::new()));
        }
        let objective = t.sub(&lo, &hi);
        let grads = t.backward(objective);
        let g = |v| grads.get(v).map_or(0.0, Matrix::item);
        let gl = vars.iter().map(|&(l, _)| g(l)).collect();
        let gu = vars.iter().map(|&(_, u)| g(u)).collect();
        Ok((lo_v, hi_v, gl, gu))
    }

    fn bound(&self, constraints: &[Constraint], config: &BnBConfig) -> Result<Domain> {
        let n = constraints.len();
        let mut bl = vec![0.0; n];
        let mut bu = vec![0.0; n];
        let (lo, hi, mut gl, mut gu) = self.evaluate(constraints, &bl, &bu)?;
        let mut best = Domain {
            constraints: constraints.to_vec(),
            betas_lower: bl.clone(),
            betas_upper: bu.clone(),
            bounds: ConcreteBounds {
                lo,
                hi,
                delta: self.delta,
            },
        };
        if n == 0 {
            return Ok(best);
        }
        for _ in 0..config.beta_steps {
            for (b, g) in bl.iter_mut().zip(&gl) {
                *b = (*b + config.beta_lr * g).max(0.0);
            }
            for (b, g) in bu.iter_mut().zip(&gu) {
                *b = (*b + config.beta_lr * g).max(0.0);
            }
            let (lo, hi, ngl, ngu) = self.evaluate(constraints, &bl, &bu)?;
            if lo > best.bounds.lo {
                best.bounds.lo = lo;
                best.betas_lower = bl.clone();
            }
            if hi < best.bounds.hi {
                best.bounds.hi = hi;
                best.betas_upper = bu.clone();
            }
            gl = ngl;
            gu = ngu;
        }
        Ok(best)
    }
}

fn check_constraints(
    graph: &Graph,
    intervals: &BTreeMap<NodeId, IntervalBound>,
    constraints: &[Constraint],
) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in constraints {
        let feeds = intervals
            .iter()
            .find(|(&relu, _)| graph.node(relu).inputs[0] == c.node);
        let Some((_, iv)) = feeds else {
            return Err(Error::InvalidArgument(format!(
                "constrained node {} does not feed a ReLU",
                c.node
            )));
        };
        if c.neuron >= iv.len() {
            return Err(Error::IndexOutOfRange {
                index: c.neuron,
                len: iv.len(),
            });
        }
        if !seen.insert((c.node, c.neuron)) {
            return Err(Error::InvalidArgument(format!(
                "neuron {} of {} constrained twice",
                c.neuron, c.node
            )));
        }
    }
    Ok(())
}

/// Bounds the output variation over the sub-domain cut out by
/// `constraints`, using the fixed root `intervals` for unconstrained ReLUs.
/// The returned bounds are never worse than those at `β = 0`.
pub fn bound_domain(
    graph: &Graph,
    intervals: &BTreeMap<NodeId, IntervalBound>,
    constraints: &[Constraint],
    delta: f64,
    config: &BnBConfig,
) -> Result<Domain> {
    graph.ensure_valid()?;
    graph.ensure_lowered()?;
    check_constraints(graph, intervals, constraints)?;
    Problem::new(graph, intervals, delta).bound(constraints, config)
}

fn check_config(config: &BnBConfig) -> Result<()> {
    if !(config.beta_lr > 0.0 && config.beta_lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "β step size must be positive, got {}",
            config.beta_lr
        )));
    }
    Ok(())
}

/// Anytime refinement of the output variation interval of a scalar-output
/// graph. Every history entry is a sound interval.
pub fn run(graph: &Graph, delta: f64, config: &BnBConfig) -> Result<BnBResult> {
    check_config(config)?;
    let start = Instant::now();
    graph.ensure_valid()?;
    let g = lower(graph)?;
    let dim = g.output_dim();
    if dim != 1 {
        return Err(Error::NonScalarOutput(dim));
    }
    let intervals = compute_relu_input_intervals(&g, delta)?;
    let problem = Problem::new(&g, &intervals, delta);
    let root = problem.bound(&[], config)?;
    let mut global = root.bounds;
    let mut history = vec![HistoryEntry {
        time_s: start.elapsed().as_secs_f64(),
        splits: 0,
        lo: global.lo,
        hi: global.hi,
    }];
    let mut leaves = vec![root];
    let mut splits = 0;
    let mut explored = 1;
    while splits < config.max_splits {
        if config.timeout.is_some_and(|t| start.elapsed() >= t) {
            break;
        }
        let mut worst = 0;
        let mut worst_score = f64::NEG_INFINITY;
        for (i, leaf) in leaves.iter().enumerate() {
            let score = (-leaf.bounds.lo).max(leaf.bounds.hi);
            if score > worst_score {
                worst = i;
                worst_score = score;
            }
        }
        let parent = &leaves[worst];
        let Some((node, neuron)) = select_branch_neuron(&g, &intervals, &parent.constraints) else {
            break;
        };
        let child = |sign| {
            let mut cs = parent.constraints.clone();
            cs.push(Constraint { node, neuron, sign });
            problem.bound(&cs, config)
        };
        let (neg, pos) = rayon::join(
            || child(BranchSign::NonPositive),
            || child(BranchSign::NonNegative),
        );
        let (plo, phi) = (parent.bounds.lo, parent.bounds.hi);
        let mut children = [neg?, pos?];
        for c in &mut children {
            c.bounds.lo = c.bounds.lo.max(plo);
            c.bounds.hi = c.bounds.hi.min(phi);
        }
        leaves.splice(worst..=worst, children);
        splits += 1;
        explored += 2;
        global.lo = leaves
            .iter()
            .map(|l| l.bounds.lo)
            .fold(f64::INFINITY, f64::min);
        global.hi = leaves
            .iter()
            .map(|l| l.bounds.hi)
            .fold(f64::NEG_INFINITY, f64::max);
        history.push(HistoryEntry {
            time_s: start.elapsed().as_secs_f64(),
            splits,
            lo: global.lo,
            hi: global.hi,
        });
    }
    Ok(BnBResult {
        best: global,
        history,
        domains_explored: explored,
    })
}
