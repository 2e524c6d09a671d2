//! Empirical lower bounds on the maximal output variation.
//!
//! Both searches only ever report variations they actually observed, so
//! every certified interval must contain them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Tensor};
use crate::lower::lower;
use crate::matrix::Matrix;
use crate::tape::{forward_batch, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub restarts: usize,
    /// Sign-gradient step as a fraction of δ.
    pub step_size: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            restarts: 3,
            step_size: 0.1,
            seed: 0,
        }
    }
}

/// A perturbed pair and the variation it produces on one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub channel: usize,
    pub x: Vec<f64>,
    pub dx: Vec<f64>,
    pub variation: f64,
}

impl Witness {
    /// Recomputes `F_c(x + Δx) − F_c(x)`.
    pub fn replay(&self, graph: &Graph) -> Result<f64> {
        let shape = graph.input_shape().clone();
        let x = Tensor::new(shape.clone(), self.x.clone())?;
        let xp: Vec<f64> = self.x.iter().zip(&self.dx).map(|(a, b)| a + b).collect();
        let xp = Tensor::new(shape, xp)?;
        let fx = graph.forward(&x)?;
        let fp = graph.forward(&xp)?;
        Ok(fp.data()[self.channel] - fx.data()[self.channel])
    }
}

/// Per-channel observed extremes. `eps_under[c] = max(max_increase[c],
/// −max_decrease[c])`, witnessed by `witnesses[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderApprox {
    pub eps_under: Vec<f64>,
    pub max_increase: Vec<f64>,
    pub max_decrease: Vec<f64>,
    pub witnesses: Vec<Witness>,
}

impl UnderApprox {
    fn empty(dim: usize) -> Self {
        Self {
            eps_under: vec![0.0; dim],
            max_increase: vec![0.0; dim],
            max_decrease: vec![0.0; dim],
            witnesses: (0..dim)
                .map(|c| Witness {
                    channel: c,
                    x: Vec::new(),
                    dx: Vec::new(),
                    variation: 0.0,
                })
                .collect(),
        }
    }

    fn observe(&mut self, c: usize, x: &[f64], dx: &[f64], v: f64) {
        self.max_increase[c] = self.max_increase[c].max(v);
        self.max_decrease[c] = self.max_decrease[c].min(v);
        if v.abs() > self.eps_under[c] || self.witnesses[c].x.is_empty() {
            self.eps_under[c] = self.eps_under[c].max(v.abs());
            self.witnesses[c] = Witness {
                channel: c,
                x: x.to_vec(),
                dx: dx.to_vec(),
                variation: v,
            };
        }
    }

    /// Combines two results; ties keep `self`'s witness.
    fn merge(mut self, other: Self) -> Self {
        for c in 0..self.eps_under.len() {
            self.max_increase[c] = self.max_increase[c].max(other.max_increase[c]);
            self.max_decrease[c] = self.max_decrease[c].min(other.max_decrease[c]);
            if other.eps_under[c] > self.eps_under[c] || self.witnesses[c].x.is_empty() {
                self.eps_under[c] = other.eps_under[c];
                self.witnesses[c] = other.witnesses[c].clone();
            }
        }
        self
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation radius must be finite and nonnegative, got {delta}"
        )));
    }
    Ok(())
}

fn eval(graph: &Graph, x: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::new(graph.input_shape().clone(), x.to_vec())?;
    Ok(graph.forward(&t)?.into_data())
}

/// Gradient of `F_channel` at `x`.
fn input_gradient(lowered: &Graph, x: &[f64], channel: usize) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for id in lowered.linear_nodes() {
        let w = t.leaf(lowered.linear_weight(id).expect("linear"));
        let b = lowered.linear_bias(id).expect("linear").to_vec();
        let b = t.leaf(Matrix::from_vec(1, b.len(), b));
        weights.insert(id, w);
        biases.insert(id, b);
    }
    let xv = t.leaf(Matrix::from_vec(1, x.len(), x.to_vec()));
    let out = forward_batch(&mut t, lowered, &weights, &biases, xv)?;
    let dim = t.get(out).cols();
    let mut sel = Matrix::zeros(dim, 1);
    sel.set(channel, 0, 1.0);
    let sel = t.leaf(sel);
    let y = crate::backend::Backend::matmul(&mut t, &out, &sel);
    let g = t.backward(y);
    Ok(g.get_or_zeros(xv, (1, x.len())).into_vec())
}

/// Projected sign-gradient ascent of `±(F_c(x+Δ) − F_c(x))` over
/// `‖Δ‖∞ ≤ δ` from every input point, for every output channel.
pub fn pgd_variation(
    graph: &Graph,
    inputs: &[Tensor],
    delta: f64,
    config: &AttackConfig,
) -> Result<UnderApprox> {
    check_delta(delta)?;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "attack needs at least one input point".into(),
        ));
    }
    graph.ensure_valid()?;
    let lowered = lower(graph)?;
    let dim = graph.output_dim();
    let n = graph.input_shape().numel();
    for x in inputs {
        if x.shape() != graph.input_shape() {
            return Err(Error::Shape(format!(
                "attack input has shape {}, network expects {}",
                x.shape(),
                graph.input_shape()
            )));
        }
    }
    let step = config.step_size * delta;
    let results: Vec<Result<UnderApprox>> = inputs
        .par_iter()
        .enumerate()
        .map(|(p, x)| {
            let x = x.data();
            let fx = eval(graph, x)?;
            let mut acc = UnderApprox::empty(dim);
            for c in 0..dim {
                for r in 0..config.restarts.max(1) {
                    for dir in [1.0, -1.0] {
                        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                        rng.set_stream(
                            ((p * dim + c) * config.restarts.max(1) + r) as u64 * 2
                                + (dir < 0.0) as u64,
                        );
                        let mut dx: Vec<f64> = if r == 0 {
                            vec![0.0; n]
                        } else {
                            (0..n).map(|_| rng.gen_range(-delta..=delta)).collect()
                        };
                        for s in 0..=config.steps {
                            let xp: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
                            let v = eval(graph, &xp)?[c] - fx[c];
                            acc.observe(c, x, &dx, v);
                            if s == config.steps || delta == 0.0 {
                                break;
                            }
                            let g = input_gradient(&lowered, &xp, c)?;
                            for (d, gi) in dx.iter_mut().zip(g) {
                                let dirn = dir * gi;
                                if dirn != 0.0 {
                                    *d = (*d + step * dirn.signum()).clamp(-delta, delta);
                                }
                            }
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut out = UnderApprox::empty(dim);
    for r in results {
        out = out.merge(r?);
    }
    Ok(out)
}

/// Box from which sampling draws unperturbed inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: f64,
    pub hi: f64,
}

impl Default for InputBox {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }
}

/// Draws `n` pairs `x ~ U(box)`, `Δ ~ U([−δ, δ]ⁿ)` and records the observed
/// variations.
pub fn sampling_oracle(
    graph: &Graph,
    delta: f64,
    n: usize,
    seed: u64,
    input_box: InputBox,
) -> Result<UnderApprox> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::InvalidArgument("sampling needs n ≥ 1".into()));
    }
    if !(input_box.lo <= input_box.hi) {
        return Err(Error::InvalidArgument("empty sampling box".into()));
    }
    graph.ensure_valid()?;
    let dim = graph.output_dim();
    let pairs = sample_pairs(graph.input_shape().numel(), delta, n, seed, input_box);
    let results: Vec<Result<UnderApprox>> = pairs
        .par_chunks(256)
        .map(|chunk| {
            let mut acc = UnderApprox::empty(dim);
            for (x, dx) in chunk {
                let fx = eval(graph, x)?;
                let xp: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
                let fp = eval(graph, &xp)?;
                for c in 0..dim {
                    acc.observe(c, x, dx, fp[c] - fx[c]);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut out = UnderApprox::empty(dim);
    for r in results {
        out = out.merge(r?);
    }
    Ok(out)
}

/// The `(x, Δx)` pairs drawn by [`sampling_oracle`] for the same arguments.
pub fn sample_pairs(
    input_dim: usize,
    delta: f64,
    n: usize,
    seed: u64,
    input_box: InputBox,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = (0..input_dim)
                .map(|_| lerp(input_box.lo, input_box.hi, rng.gen::<f64>()))
                .collect();
            let dx = (0..input_dim)
                .map(|_| lerp(-delta, delta, rng.gen::<f64>()))
                .collect();
            (x, dx)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Distances `x'_j − x_j` of every node for one pair, keyed by node.
pub fn node_distances(graph: &Graph, x: &[f64], dx: &[f64]) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let shape = graph.input_shape().clone();
    let xp: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
    let a = graph.forward_trace(&Tensor::new(shape.clone(), x.to_vec())?)?;
    let b = graph.forward_trace(&Tensor::new(shape, xp)?)?;
    Ok(graph
        .ids()
        .map(|id| {
            let d = b[id.0]
                .data()
                .iter()
                .zip(a[id.0].data())
                .map(|(p, q)| p - q)
                .collect();
            (id, d)
        })
        .collect())
}
