//! Training with the width of the certified variation interval as a
//! regularizer.
//!
//! `R_GR` is evaluated by the same propagation as certification, run on a
//! [`Tape`] with the Linear weights as leaves, so its gradient follows the
//! relaxation coefficients and (unless detached) the ReLU intervals.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::graph::{mlp, Graph, NodeId, Tensor, TensorShape};
use crate::lower::lower;
use crate::matrix::Matrix;
use crate::propagate::{channel_bounds, concretize_with, relu_hulls, substitute};
use crate::tape::{forward_batch, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "dataset mixes input shapes {} and {}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Reinterprets every sample with `shape` (same element count).
    pub fn with_input_shape(self, shape: &TensorShape) -> Result<Self> {
        let inputs = self
            .inputs
            .into_iter()
            .map(|t| Tensor::new(shape.clone(), t.into_data()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, ..self })
    }

    fn check_against(&self, graph: &Graph) -> Result<()> {
        let classes = graph.output_dim();
        if let Some(&y) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        if let Some(x) = self
            .inputs
            .iter()
            .find(|x| x.shape() != graph.input_shape())
        {
            return Err(Error::Shape(format!(
                "sample shape {} does not match network input {}",
                x.shape(),
                graph.input_shape()
            )));
        }
        Ok(())
    }
}

/// How per-channel widths combine into one regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RgrAgg {
    #[default]
    Sum,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub delta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub detach_intervals: bool,
    pub agg: RgrAgg,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.0,
            delta: 2.0 / 255.0,
            lr: 0.05,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            detach_intervals: false,
            agg: RgrAgg::Sum,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidArgument(format!(
                "{what} must be positive, got {v}"
            )))
        };
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_reg must be nonnegative, got {}",
                self.lambda_reg
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta", self.delta);
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate", self.lr);
        }
        if self.batch_size == 0 {
            return bad("batch size", 0.0);
        }
        Ok(())
    }
}

/// Fully connected ReLU network with layer widths `dims` (input first),
/// weights uniform in `±sqrt(6/fan_in)` and zero biases.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<Graph> {
    use rand::Rng;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "need at least two positive layer widths, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let a = (6.0 / w[0] as f64).sqrt();
            let data = (0..w[0] * w[1]).map(|_| rng.gen_range(-a..a)).collect();
            (Matrix::from_vec(w[1], w[0], data), vec![0.0; w[1]])
        })
        .collect();
    mlp(dims[0], layers)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RGRValue {
    pub value: f64,
    /// `hi − lo` of every output channel.
    pub per_channel: Vec<f64>,
    /// `∂R_GR/∂W` for every Linear node, shaped like its weight.
    pub grads: BTreeMap<NodeId, Matrix>,
}

/// `R_GR` on any backend: per-channel widths (column) and their aggregate.
fn rgr_on<B: Backend>(
    be: &mut B,
    graph: &Graph,
    weights: &BTreeMap<NodeId, B::M>,
    delta: f64,
    detach: bool,
    agg: RgrAgg,
) -> Result<(B::M, B::M)> {
    let (_, hulls) = relu_hulls(be, graph, weights, delta, detach)?;
    let dim = graph.output_dim();
    let out = substitute(
        be,
        graph,
        weights,
        &hulls,
        graph.output(),
        Matrix::identity(dim),
        &[],
        None,
    )?;
    let (lo, hi) = concretize_with(be, &out, delta);
    let width = be.sub(&hi, &lo);
    let total = match agg {
        RgrAgg::Sum => be.sum(&width),
        RgrAgg::Max => {
            let w = be.value(&width).data();
            let mut arg = 0;
            for (i, &v) in w.iter().enumerate() {
                if v > w[arg] {
                    arg = i;
                }
            }
            let mut pick = Matrix::zeros(1, dim);
            pick.set(0, arg, 1.0);
            let pick = be.constant(pick);
            be.matmul(&pick, &width)
        }
    };
    Ok((width, total))
}

fn prepared(graph: &Graph) -> Result<Graph> {
    graph.ensure_valid()?;
    lower(graph)
}

fn weight_leaves(t: &mut Tape, graph: &Graph) -> BTreeMap<NodeId, crate::tape::Var> {
    graph
        .linear_nodes()
        .into_iter()
        .map(|id| (id, t.leaf(graph.linear_weight(id).expect("linear"))))
        .collect()
}

/// `R_GR` over all output channels and its gradient w.r.t. every weight.
pub fn rgr_with_grad_agg(
    graph: &Graph,
    delta: f64,
    agg: RgrAgg,
    detach_intervals: bool,
) -> Result<RGRValue> {
    let g = prepared(graph)?;
    let mut t = Tape::new();
    let weights = weight_leaves(&mut t, &g);
    let (width, total) = rgr_on(&mut t, &g, &weights, delta, detach_intervals, agg)?;
    let grads = t.backward(total);
    Ok(RGRValue {
        value: t.get(total).item(),
        per_channel: t.get(width).data().to_vec(),
        grads: weights
            .iter()
            .map(|(&id, &v)| (id, grads.get_or_zeros(v, t.get(v).shape())))
            .collect(),
    })
}

/// `R_GR = hi − lo` of a scalar-output graph and its weight gradient.
pub fn rgr_with_grad(graph: &Graph, delta: f64) -> Result<RGRValue> {
    let dim = graph.output_dim();
    if dim != 1 {
        return Err(Error::NonScalarOutput(dim));
    }
    rgr_with_grad_agg(graph, delta, RgrAgg::Sum, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub cross_entropy: f64,
    pub rgr: f64,
    pub weight_grads: BTreeMap<NodeId, Matrix>,
    pub bias_grads: BTreeMap<NodeId, Vec<f64>>,
}

fn batch_matrix(inputs: &[&Tensor]) -> Matrix {
    let n = inputs[0].numel();
    let mut data = Vec::with_capacity(inputs.len() * n);
    for x in inputs {
        data.extend_from_slice(x.data());
    }
    Matrix::from_vec(inputs.len(), n, data)
}

fn loss_lowered(
    g: &Graph,
    inputs: &[&Tensor],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<LossValue> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let classes = g.output_dim();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: classes,
        });
    }
    let mut t = Tape::new();
    let weights = weight_leaves(&mut t, g);
    let biases: BTreeMap<_, _> = g
        .linear_nodes()
        .into_iter()
        .map(|id| {
            let b = g.linear_bias(id).expect("linear").to_vec();
            (id, t.leaf(Matrix::from_vec(1, b.len(), b)))
        })
        .collect();
    let x = t.constant(batch_matrix(inputs));
    let logits = forward_batch(&mut t, g, &weights, &biases, x)?;
    let ce = t.softmax_xent(logits, labels);
    let (root, rgr) = if config.lambda_reg > 0.0 {
        let (_, r) = rgr_on(
            &mut t,
            g,
            &weights,
            config.delta,
            config.detach_intervals,
            config.agg,
        )?;
        let scaled = t.scale(&r, config.lambda_reg);
        (t.add(&ce, &scaled), t.get(r).item())
    } else {
        (ce, f64::NAN)
    };
    let grads = t.backward(root);
    Ok(LossValue {
        total: t.get(root).item(),
        cross_entropy: t.get(ce).item(),
        rgr,
        weight_grads: weights
            .iter()
            .map(|(&id, &v)| (id, grads.get_or_zeros(v, t.get(v).shape())))
            .collect(),
        bias_grads: biases
            .iter()
            .map(|(&id, &v)| (id, grads.get_or_zeros(v, t.get(v).shape()).into_vec()))
            .collect(),
    })
}

/// `L0 + λ·R_GR` on a batch with gradients for all weights and biases.
/// `rgr` is NaN when `lambda_reg` is zero and the regularizer is skipped.
pub fn loss(graph: &Graph, batch: &Dataset, config: &TrainConfig) -> Result<LossValue> {
    config.check()?;
    let g = prepared(graph)?;
    batch.check_against(&g)?;
    let inputs: Vec<&Tensor> = batch.inputs.iter().collect();
    loss_lowered(&g, &inputs, &batch.labels, config)
}

/// Fraction of samples whose largest logit is at the label.
pub fn accuracy(graph: &Graph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let out = graph.forward(x)?;
        let mut arg = 0;
        for (i, &v) in out.data().iter().enumerate() {
            if v > out.data()[arg] {
                arg = i;
            }
        }
        correct += usize::from(arg == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub rgr: f64,
    /// Per-channel `max(|lo|, |hi|)` of the certified interval at the
    /// training δ.
    pub bound: Vec<f64>,
}

impl EpochMetrics {
    pub fn csv_header(channels: usize) -> String {
        let mut s = String::from("epoch,train_acc,test_acc,rgr,bound_max,bound_mean");
        for c in 0..channels {
            s.push_str(&format!(",bound_{c}"));
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let max = self.bound.iter().cloned().fold(0.0, f64::max);
        let mean = self.bound.iter().sum::<f64>() / self.bound.len().max(1) as f64;
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_acc, self.test_acc, self.rgr, max, mean
        );
        for b in &self.bound {
            s.push_str(&format!(",{b}"));
        }
        s
    }
}

fn epoch_metrics(
    g: &Graph,
    epoch: usize,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<EpochMetrics> {
    let bounds = channel_bounds(g, config.delta)?;
    let widths: Vec<f64> = bounds.iter().map(|b| b.hi - b.lo).collect();
    let rgr = match config.agg {
        RgrAgg::Sum => widths.iter().sum(),
        RgrAgg::Max => widths.iter().cloned().fold(0.0, f64::max),
    };
    Ok(EpochMetrics {
        epoch,
        train_acc: accuracy(g, train)?,
        test_acc: test.map_or(Ok(f64::NAN), |t| accuracy(g, t))?,
        rgr,
        bound: bounds.iter().map(|b| b.magnitude()).collect(),
    })
}

/// Shuffled mini-batch SGD on `L0 + λ·R_GR`. Returns the trained (lowered)
/// graph and metrics before training (epoch 0) and after every epoch.
pub fn sgd_train(
    graph: &Graph,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Graph, Vec<EpochMetrics>)> {
    config.check()?;
    let mut g = prepared(graph)?;
    train.check_against(&g)?;
    if let Some(t) = test {
        t.check_against(&g)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = vec![epoch_metrics(&g, 0, train, test, config)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &train.inputs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let lv = loss_lowered(&g, &inputs, &labels, config)?;
            let params = g.linear_nodes().into_iter().map(|id| {
                let mut w = g.linear_weight(id).expect("linear");
                let gw = &lv.weight_grads[&id];
                for (p, d) in w.data_mut().iter_mut().zip(gw.data()) {
                    *p -= config.lr * d;
                }
                let b = g
                    .linear_bias(id)
                    .expect("linear")
                    .iter()
                    .zip(&lv.bias_grads[&id])
                    .map(|(p, d)| p - config.lr * d)
                    .collect();
                (id, w, b)
            });
            let params: Vec<_> = params.collect();
            g = g.with_linear_params(params)?;
        }
        metrics.push(epoch_metrics(&g, epoch, train, test, config)?);
    }
    Ok((g, metrics))
}

/// Result of comparing analytic and finite-difference `R_GR` gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    /// `(node, row, col, analytic, finite difference)` of the worst weight.
    pub worst: Option<(usize, usize, usize, f64, f64)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative error denominator floor; gradients smaller than this are
/// compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Compares every weight's analytic `∂R_GR/∂w` (summed over channels)
/// against central differences with `h = 1e-5·(1+|w|)`. A weight is
/// excluded when the three stencil points do not share the same pattern of
/// signs and hull cases, i.e. the stencil straddles a kink.
pub fn finite_diff_check(graph: &Graph, delta: f64, tolerance: f64) -> Result<GradCheckReport> {
    let g = prepared(graph)?;
    let analytic = rgr_with_grad_agg(&g, delta, RgrAgg::Sum, false)?;
    let base: BTreeMap<NodeId, Matrix> = g
        .linear_nodes()
        .into_iter()
        .map(|id| (id, g.linear_weight(id).expect("linear")))
        .collect();
    let eval = |weights: &BTreeMap<NodeId, Matrix>| -> Result<(f64, Vec<i8>)> {
        let mut be = Eager::recording();
        let w = weights
            .iter()
            .map(|(&id, m)| (id, be.constant(m.clone())))
            .collect();
        let (_, total) = rgr_on(&mut be, &g, &w, delta, false, RgrAgg::Sum)?;
        Ok((total.item(), be.take_pattern().unwrap_or_default()))
    };
    let (_, pattern0) = eval(&base)?;
    let mut report = GradCheckReport {
        checked: 0,
        excluded: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
        pass: true,
    };
    let mut weights = base.clone();
    for (&id, w) in &base {
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let w0 = w.get(r, c);
                let h = 1e-5 * (1.0 + w0.abs());
                weights.get_mut(&id).expect("present").set(r, c, w0 + h);
                let (fp, pp) = eval(&weights)?;
                weights.get_mut(&id).expect("present").set(r, c, w0 - h);
                let (fm, pm) = eval(&weights)?;
                weights.get_mut(&id).expect("present").set(r, c, w0);
                if pp != pattern0 || pm != pattern0 {
                    report.excluded += 1;
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic.grads[&id].get(r, c);
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((id.0, r, c, a, fd));
                }
            }
        }
    }
    report.pass = report.max_rel_error <= tolerance;
    Ok(report)
}
