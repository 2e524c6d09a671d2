//! Network graphs.
//!
//! A [`Graph`] is an immutable DAG of layers. Construction only rejects
//! dangling node references; every other structural problem is collected in
//! a [`ValidationReport`] that is computed once and cached, so a malformed
//! graph can still be inspected. Operations that need an admissible graph
//! call [`Graph::ensure_valid`].

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be non-empty and positive, got {dims:?}"
            )));
        }
        Ok(Self(dims))
    }

    pub fn vector(n: usize) -> Self {
        Self::new(vec![n]).expect("vector length must be positive")
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(s: TensorShape) -> Self {
        s.0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense row-major tensor with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: TensorShape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite tensor entry {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let shape = TensorShape::new(vec![data.len()])?;
        Self::new(shape, data)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let shape = TensorShape::new(vec![m.rows(), m.cols()])?;
        Self::new(shape, m.data().to_vec())
    }

    pub fn zeros(shape: TensorShape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Views a rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Matrix {
        let d = self.shape.dims();
        assert_eq!(d.len(), 2, "to_matrix on rank-{} tensor", d.len());
        Matrix::from_vec(d[0], d[1], self.data.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zeros,
    Reflect,
}

/// 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[out_channels, in_channels, kh, kw]`
    pub kernel: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub padding_mode: PaddingMode,
}

/// Max pooling over the trailing `window.len()` dimensions; leading
/// dimensions are treated as channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool {
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
}

impl MaxPool {
    /// Non-overlapping pooling (stride equals window).
    pub fn new(window: Vec<usize>) -> Self {
        Self {
            stride: window.clone(),
            window,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input {
        shape: TensorShape,
    },
    /// `y = W·flatten(x) + b`, optionally reshaped.
    Linear {
        weight: Tensor,
        bias: Tensor,
        out_shape: Option<TensorShape>,
    },
    Conv2d(Conv2d),
    Relu,
    MaxPool(MaxPool),
    Add,
    /// Inputs are ordered `(minuend, subtrahend)`.
    Sub,
    Output,
}

impl NodeKind {
    pub fn arity(&self) -> usize {
        match self {
            NodeKind::Input { .. } => 0,
            NodeKind::Add | NodeKind::Sub => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Linear { .. } => "linear",
            NodeKind::Conv2d(_) => "conv2d",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool(_) => "maxpool",
            NodeKind::Add => "add",
            NodeKind::Sub => "sub",
            NodeKind::Output => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    Arity {
        node: NodeId,
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    Shape {
        node: NodeId,
        detail: String,
    },
    Cycle {
        nodes: Vec<NodeId>,
    },
    InputCount {
        found: usize,
    },
    OutputCount {
        found: usize,
    },
    Endpoint {
        node: NodeId,
        expected: &'static str,
    },
    Unreachable {
        node: NodeId,
    },
    DeadEnd {
        node: NodeId,
    },
    DuplicateName {
        name: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Arity {
                node,
                kind,
                expected,
                found,
            } => write!(f, "{node} ({kind}) takes {expected} inputs, has {found}"),
            Violation::Shape { node, detail } => write!(f, "{node}: {detail}"),
            Violation::Cycle { nodes } => write!(f, "cycle through {nodes:?}"),
            Violation::InputCount { found } => write!(f, "expected one input node, found {found}"),
            Violation::OutputCount { found } => {
                write!(f, "expected one output node, found {found}")
            }
            Violation::Endpoint { node, expected } => {
                write!(f, "{node} is designated {expected} but has another kind")
            }
            Violation::Unreachable { node } => write!(f, "{node} unreachable from input"),
            Violation::DeadEnd { node } => write!(f, "{node} does not reach the output"),
            Violation::DuplicateName { name } => write!(f, "duplicate node name `{name}`"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    input: NodeId,
    output: NodeId,
    dtype: DType,
    topo: Option<Vec<NodeId>>,
    shapes: Vec<Option<TensorShape>>,
    report: ValidationReport,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.input == other.input
            && self.output == other.output
            && self.dtype == other.dtype
    }
}

impl Graph {
    /// Fails only when a node references a nonexistent id; see
    /// [`Graph::validate`] for everything else.
    pub fn new(nodes: Vec<Node>, input: NodeId, output: NodeId) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(bad) = node.inputs.iter().find(|p| p.0 >= n) {
                return Err(Error::InvalidArgument(format!(
                    "node #{i} references missing node {bad}"
                )));
            }
        }
        if input.0 >= n || output.0 >= n {
            return Err(Error::InvalidArgument(
                "input/output id out of range".into(),
            ));
        }
        let mut g = Graph {
            nodes,
            input,
            output,
            dtype: DType::F64,
            topo: None,
            shapes: Vec::new(),
            report: ValidationReport::default(),
        };
        g.analyze();
        Ok(g)
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn validate(&self) -> &ValidationReport {
        &self.report
    }

    pub fn ensure_valid(&self) -> Result<()> {
        if self.report.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph(self.report.clone()))
        }
    }

    /// Cached topological order; `None` if the graph has a cycle.
    pub fn topo_order(&self) -> Option<&[NodeId]> {
        self.topo.as_deref()
    }

    pub(crate) fn topo(&self) -> &[NodeId] {
        self.topo
            .as_deref()
            .expect("topological order of a valid graph")
    }

    /// Output shape of a node; `None` when shape inference failed upstream.
    pub fn shape(&self, id: NodeId) -> Option<&TensorShape> {
        self.shapes.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn numel(&self, id: NodeId) -> usize {
        self.shape(id).map_or(0, TensorShape::numel)
    }

    pub fn input_shape(&self) -> &TensorShape {
        match &self.nodes[self.input.0].kind {
            NodeKind::Input { shape } => shape,
            _ => panic!("input id does not name an Input node"),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.numel(self.output)
    }

    /// Ids of nodes consuming `id`, each listed once per edge.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.ids()
            .filter(|c| self.nodes[c.0].inputs.contains(&id))
            .collect()
    }

    pub fn is_lowered(&self) -> bool {
        !self
            .nodes
            .iter()
            .any(|n| matches!(n.kind, NodeKind::MaxPool(_) | NodeKind::Conv2d(_)))
    }

    pub(crate) fn ensure_lowered(&self) -> Result<()> {
        for id in self.ids() {
            let k = &self.nodes[id.0].kind;
            if matches!(k, NodeKind::MaxPool(_) | NodeKind::Conv2d(_)) {
                return Err(Error::NotLowered(id, k.name()));
            }
        }
        Ok(())
    }

    pub fn relu_nodes(&self) -> Vec<NodeId> {
        self.topo
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .copied()
            .filter(|&id| matches!(self.nodes[id.0].kind, NodeKind::Relu))
            .collect()
    }

    pub fn linear_nodes(&self) -> Vec<NodeId> {
        self.ids()
            .filter(|&id| matches!(self.nodes[id.0].kind, NodeKind::Linear { .. }))
            .collect()
    }

    /// Weight of a Linear node as an `out × in` matrix.
    pub fn linear_weight(&self, id: NodeId) -> Option<Matrix> {
        match &self.nodes[id.0].kind {
            NodeKind::Linear { weight, .. } => Some(weight.to_matrix()),
            _ => None,
        }
    }

    pub fn linear_bias(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].kind {
            NodeKind::Linear { bias, .. } => Some(bias.data()),
            _ => None,
        }
    }

    /// Returns a copy with new parameters for some Linear nodes.
    pub fn with_linear_params(
        &self,
        params: impl IntoIterator<Item = (NodeId, Matrix, Vec<f64>)>,
    ) -> Result<Graph> {
        let mut nodes = self.nodes.clone();
        for (id, w, b) in params {
            match &mut nodes[id.0].kind {
                NodeKind::Linear { weight, bias, .. } => {
                    if (w.rows(), w.cols()) != (weight.shape().dims()[0], weight.shape().dims()[1])
                        || b.len() != bias.numel()
                    {
                        return Err(Error::Shape(format!("parameter update for {id}")));
                    }
                    *weight = Tensor::from_matrix(&w)?;
                    *bias = Tensor::new(bias.shape().clone(), b)?;
                }
                _ => {
                    return Err(Error::InvalidArgument(format!("{id} is not a linear node")));
                }
            }
        }
        Ok(Graph::new(nodes, self.input, self.output)?.with_dtype(self.dtype))
    }

    fn analyze(&mut self) {
        let mut violations = Vec::new();
        let n = self.nodes.len();

        let mut names = HashSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                violations.push(Violation::DuplicateName {
                    name: node.name.clone(),
                });
            }
        }

        let inputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Input { .. }))
            .count();
        let outputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Output))
            .count();
        if inputs != 1 {
            violations.push(Violation::InputCount { found: inputs });
        }
        if outputs != 1 {
            violations.push(Violation::OutputCount { found: outputs });
        }
        if !matches!(self.nodes[self.input.0].kind, NodeKind::Input { .. }) {
            violations.push(Violation::Endpoint {
                node: self.input,
                expected: "input",
            });
        }
        if !matches!(self.nodes[self.output.0].kind, NodeKind::Output) {
            violations.push(Violation::Endpoint {
                node: self.output,
                expected: "output",
            });
        }

        let mut arity_ok = true;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.len() != node.kind.arity() {
                arity_ok = false;
                violations.push(Violation::Arity {
                    node: NodeId(i),
                    kind: node.kind.name(),
                    expected: node.kind.arity(),
                    found: node.inputs.len(),
                });
            }
        }

        // Kahn's algorithm, smallest ready id first for a deterministic order.
        let mut indegree: Vec<usize> = self.nodes.iter().map(|n| n.inputs.len()).collect();
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for p in &node.inputs {
                consumers[p.0].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(NodeId(i));
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).filter(|&i| indegree[i] > 0).map(NodeId).collect();
            violations.push(Violation::Cycle { nodes: stuck });
        } else {
            self.topo = Some(order);
        }

        // Reachability from the input and to the output.
        let mut fwd = vec![false; n];
        let mut queue = VecDeque::from([self.input.0]);
        fwd[self.input.0] = true;
        while let Some(i) = queue.pop_front() {
            for &c in &consumers[i] {
                if !fwd[c] {
                    fwd[c] = true;
                    queue.push_back(c);
                }
            }
        }
        let mut bwd = vec![false; n];
        let mut queue = VecDeque::from([self.output.0]);
        bwd[self.output.0] = true;
        while let Some(i) = queue.pop_front() {
            for p in &self.nodes[i].inputs {
                if !bwd[p.0] {
                    bwd[p.0] = true;
                    queue.push_back(p.0);
                }
            }
        }
        for i in 0..n {
            if !fwd[i] {
                violations.push(Violation::Unreachable { node: NodeId(i) });
            }
            if !bwd[i] {
                violations.push(Violation::DeadEnd { node: NodeId(i) });
            }
        }

        self.shapes = vec![None; n];
        if let (Some(order), true) = (self.topo.clone(), arity_ok) {
            for id in order {
                let in_shapes: Option<Vec<&TensorShape>> = self.nodes[id.0]
                    .inputs
                    .iter()
                    .map(|p| self.shapes[p.0].as_ref())
                    .collect();
                let Some(in_shapes) = in_shapes else { continue };
                match infer_shape(&self.nodes[id.0].kind, &in_shapes) {
                    Ok(s) => self.shapes[id.0] = Some(s),
                    Err(detail) => violations.push(Violation::Shape { node: id, detail }),
                }
            }
        }

        self.report = ValidationReport { violations };
    }

    /// Evaluates the network on one input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut values = self.forward_trace(x)?;
        Ok(values.swap_remove(self.output.0))
    }

    /// Values of every node, indexed by node id.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.ensure_valid()?;
        if x.shape() != self.input_shape() {
            return Err(Error::Shape(format!(
                "input has shape {}, network expects {}",
                x.shape(),
                self.input_shape()
            )));
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for &id in self.topo() {
            let node = &self.nodes[id.0];
            let out_shape = self.shapes[id.0].clone().expect("inferred shape");
            let arg = |k: usize| {
                values[node.inputs[k].0]
                    .as_ref()
                    .expect("topological order")
            };
            let v = match &node.kind {
                NodeKind::Input { .. } => x.clone(),
                NodeKind::Linear { weight, bias, .. } => {
                    let cols = weight.shape().dims()[1];
                    let xin = arg(0).data();
                    let data = weight
                        .data()
                        .chunks(cols)
                        .zip(bias.data())
                        .map(|(row, b)| dot(row, xin) + b)
                        .collect();
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::Conv2d(conv) => {
                    let data = conv_forward(conv, arg(0));
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::Relu => {
                    let data = arg(0).data().iter().map(|&v| v.max(0.0)).collect();
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::MaxPool(pool) => {
                    let input = arg(0);
                    let (_, windows) =
                        pool_windows(input.shape(), pool).expect("validated pooling geometry");
                    let data = windows
                        .iter()
                        .map(|w| {
                            w.iter()
                                .map(|&i| input.data[i])
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect();
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::Add | NodeKind::Sub => {
                    let sign = if matches!(node.kind, NodeKind::Add) {
                        1.0
                    } else {
                        -1.0
                    };
                    let data = arg(0)
                        .data()
                        .iter()
                        .zip(arg(1).data())
                        .map(|(a, b)| a + sign * b)
                        .collect();
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::Output => arg(0).clone(),
            };
            values[id.0] = Some(v);
        }
        Ok(values
            .into_iter()
            .map(|v| v.expect("all nodes reachable"))
            .collect())
    }
}

fn infer_shape(
    kind: &NodeKind,
    inputs: &[&TensorShape],
) -> std::result::Result<TensorShape, String> {
    match kind {
        NodeKind::Input { shape } => Ok(shape.clone()),
        NodeKind::Linear {
            weight,
            bias,
            out_shape,
        } => {
            let wd = weight.shape().dims();
            if wd.len() != 2 {
                return Err(format!(
                    "linear weight must be rank 2, got {}",
                    weight.shape()
                ));
            }
            if inputs[0].numel() != wd[1] {
                return Err(format!(
                    "linear weight {} cannot consume input of shape {}",
                    weight.shape(),
                    inputs[0]
                ));
            }
            if bias.numel() != wd[0] {
                return Err(format!("bias length {} != {} outputs", bias.numel(), wd[0]));
            }
            match out_shape {
                Some(s) if s.numel() != wd[0] => {
                    Err(format!("out_shape {s} does not hold {} outputs", wd[0]))
                }
                Some(s) => Ok(s.clone()),
                None => Ok(TensorShape::vector(wd[0])),
            }
        }
        NodeKind::Conv2d(conv) => {
            let g = conv_geometry(inputs[0], conv)?;
            Ok(TensorShape(vec![g.out_channels, g.out_h, g.out_w]))
        }
        NodeKind::MaxPool(pool) => pool_output_shape(inputs[0], pool),
        NodeKind::Relu | NodeKind::Output => Ok(inputs[0].clone()),
        NodeKind::Add | NodeKind::Sub => {
            if inputs[0] != inputs[1] {
                Err(format!(
                    "{} operands have shapes {} and {}",
                    kind.name(),
                    inputs[0],
                    inputs[1]
                ))
            } else {
                Ok(inputs[0].clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn conv_geometry(
    input: &TensorShape,
    conv: &Conv2d,
) -> std::result::Result<ConvGeometry, String> {
    let kd = conv.kernel.shape().dims();
    if kd.len() != 4 {
        return Err(format!(
            "conv kernel must be rank 4, got {}",
            conv.kernel.shape()
        ));
    }
    let d = input.dims();
    if d.len() != 3 {
        return Err(format!("conv input must be [c, h, w], got {input}"));
    }
    if d[0] != kd[1] {
        return Err(format!(
            "conv expects {} input channels, got {}",
            kd[1], d[0]
        ));
    }
    if conv.bias.numel() != kd[0] {
        return Err(format!(
            "conv bias length {} != {} channels",
            conv.bias.numel(),
            kd[0]
        ));
    }
    if conv.stride.contains(&0) {
        return Err("conv stride must be positive".into());
    }
    if conv.padding_mode == PaddingMode::Reflect
        && (conv.padding[0] >= d[1] || conv.padding[1] >= d[2])
    {
        return Err("reflect padding must be smaller than the input extent".into());
    }
    let (ph, pw) = (d[1] + 2 * conv.padding[0], d[2] + 2 * conv.padding[1]);
    if ph < kd[2] || pw < kd[3] {
        return Err(format!(
            "conv kernel {} larger than padded input",
            conv.kernel.shape()
        ));
    }
    Ok(ConvGeometry {
        in_channels: d[0],
        in_h: d[1],
        in_w: d[2],
        out_channels: kd[0],
        kh: kd[2],
        kw: kd[3],
        out_h: (ph - kd[2]) / conv.stride[0] + 1,
        out_w: (pw - kd[3]) / conv.stride[1] + 1,
    })
}

/// Maps a padded coordinate back onto the input, or `None` for a zero pad.
pub(crate) fn conv_source(pos: isize, extent: usize, mode: PaddingMode) -> Option<usize> {
    let n = extent as isize;
    if (0..n).contains(&pos) {
        return Some(pos as usize);
    }
    match mode {
        PaddingMode::Zeros => None,
        PaddingMode::Reflect => {
            let r = if pos < 0 { -pos } else { 2 * (n - 1) - pos };
            Some(r as usize)
        }
    }
}

fn conv_forward(conv: &Conv2d, input: &Tensor) -> Vec<f64> {
    let g = conv_geometry(input.shape(), conv).expect("validated conv geometry");
    let k = conv.kernel.data();
    let x = input.data();
    let mut out = vec![0.0; g.out_channels * g.out_h * g.out_w];
    for oc in 0..g.out_channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = conv.bias.data()[oc];
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
                            let kv = k[((oc * g.in_channels + ic) * g.kh + ky) * g.kw + kx];
                            acc += kv * x[(ic * g.in_h + iy) * g.in_w + ix];
                        }
                    }
                }
                out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    out
}

fn pool_output_shape(
    input: &TensorShape,
    pool: &MaxPool,
) -> std::result::Result<TensorShape, String> {
    let k = pool.window.len();
    let d = input.dims();
    if k == 0 || k > d.len() {
        return Err(format!(
            "pool window {:?} does not fit input {input}",
            pool.window
        ));
    }
    if pool.stride.len() != k {
        return Err("pool stride and window ranks differ".into());
    }
    if pool.window.contains(&0) || pool.stride.contains(&0) {
        return Err("pool window and stride must be positive".into());
    }
    let lead = d.len() - k;
    let mut out = d[..lead].to_vec();
    for i in 0..k {
        let extent = d[lead + i];
        if extent < pool.window[i] {
            return Err(format!(
                "pool window {:?} larger than input {input}",
                pool.window
            ));
        }
        out.push((extent - pool.window[i]) / pool.stride[i] + 1);
    }
    Ok(TensorShape(out))
}

/// Output shape and, per output element, the flat input indices of its
/// pooling window (in row-major window order).
pub(crate) fn pool_windows(
    input: &TensorShape,
    pool: &MaxPool,
) -> std::result::Result<(TensorShape, Vec<Vec<usize>>), String> {
    let out_shape = pool_output_shape(input, pool)?;
    let k = pool.window.len();
    let d = input.dims();
    let lead = d.len() - k;
    let spatial_in = &d[lead..];
    let spatial_out = &out_shape.dims()[lead..];
    let channels: usize = d[..lead].iter().product();
    let in_block: usize = spatial_in.iter().product();
    let out_block: usize = spatial_out.iter().product();
    let win_size: usize = pool.window.iter().product();

    let unravel = |mut flat: usize, dims: &[usize]| -> Vec<usize> {
        let mut idx = vec![0; dims.len()];
        for (slot, &dim) in idx.iter_mut().zip(dims).rev() {
            *slot = flat % dim;
            flat /= dim;
        }
        idx
    };

    let mut windows = Vec::with_capacity(channels * out_block);
    for c in 0..channels {
        for o in 0..out_block {
            let oidx = unravel(o, spatial_out);
            let mut members = Vec::with_capacity(win_size);
            for q in 0..win_size {
                let qidx = unravel(q, &pool.window);
                let mut flat = 0;
                for i in 0..k {
                    flat = flat * spatial_in[i] + oidx[i] * pool.stride[i] + qidx[i];
                }
                members.push(c * in_block + flat);
            }
            windows.push(members);
        }
    }
    Ok((out_shape, windows))
}

/// Incremental graph construction with generated node names.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input: Option<NodeId>,
    output: Option<NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: Option<String>, kind: NodeKind, inputs: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = name.unwrap_or_else(|| format!("{}_{}", kind.name(), id.0));
        if matches!(kind, NodeKind::Input { .. }) && self.input.is_none() {
            self.input = Some(id);
        }
        if matches!(kind, NodeKind::Output) && self.output.is_none() {
            self.output = Some(id);
        }
        self.nodes.push(Node { name, kind, inputs });
        id
    }

    pub fn input(&mut self, dims: &[usize]) -> NodeId {
        let shape = TensorShape::new(dims.to_vec()).expect("positive input extents");
        self.push(None, NodeKind::Input { shape }, vec![])
    }

    /// Panics on non-finite parameters or a bias whose length differs from
    /// the weight's row count.
    pub fn linear(&mut self, x: NodeId, weight: Matrix, bias: Vec<f64>) -> NodeId {
        assert_eq!(weight.rows(), bias.len(), "bias length");
        let kind = NodeKind::Linear {
            weight: Tensor::from_matrix(&weight).expect("finite weight"),
            bias: Tensor::vector(bias).expect("finite bias"),
            out_shape: None,
        };
        self.push(None, kind, vec![x])
    }

    pub fn conv2d(&mut self, x: NodeId, conv: Conv2d) -> NodeId {
        self.push(None, NodeKind::Conv2d(conv), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(None, NodeKind::Relu, vec![x])
    }

    pub fn maxpool(&mut self, x: NodeId, pool: MaxPool) -> NodeId {
        self.push(None, NodeKind::MaxPool(pool), vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(None, NodeKind::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(None, NodeKind::Sub, vec![a, b])
    }

    pub fn output(&mut self, x: NodeId) -> NodeId {
        self.push(None, NodeKind::Output, vec![x])
    }

    /// Builds without requiring validity.
    pub fn build(self) -> Result<Graph> {
        let input = self
            .input
            .ok_or_else(|| Error::InvalidArgument("graph has no input node".into()))?;
        let output = self
            .output
            .ok_or_else(|| Error::InvalidArgument("graph has no output node".into()))?;
        Graph::new(self.nodes, input, output)
    }

    pub fn build_valid(self) -> Result<Graph> {
        let g = self.build()?;
        g.ensure_valid()?;
        Ok(g)
    }
}

/// Feed-forward ReLU network `dims[0] → … → dims[last]` with ReLU after
/// every hidden layer. `layers[i]` is `(weight, bias)`.
pub fn mlp(input_dim: usize, layers: Vec<(Matrix, Vec<f64>)>) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let mut x = b.input(&[input_dim]);
    let n = layers.len();
    for (i, (w, bias)) in layers.into_iter().enumerate() {
        x = b.linear(x, w, bias);
        if i + 1 < n {
            x = b.relu(x);
        }
    }
    b.output(x);
    b.build_valid()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_linear() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let y = b.linear(x, Matrix::from_rows(&[vec![2.0, -3.0]]), vec![0.5]);
        b.output(y);
        b.build().unwrap()
    }

    #[test]
    fn minimal_graph_is_valid() {
        let g = single_linear();
        assert!(g.validate().is_empty(), "{}", g.validate());
    }

    #[test]
    fn add_shape_mismatch_reported() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let p = b.linear(x, Matrix::zeros(3, 2), vec![0.0; 3]);
        let q = b.linear(x, Matrix::zeros(4, 2), vec![0.0; 4]);
        let s = b.add(p, q);
        b.output(s);
        let g = b.build().unwrap();
        assert!(g
            .validate()
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Shape { node, .. } if *node == s)));
        assert!(g.ensure_valid().is_err());
    }

    #[test]
    fn two_cycle_reported() {
        let nodes = vec![
            Node {
                name: "in".into(),
                kind: NodeKind::Input {
                    shape: TensorShape::vector(1),
                },
                inputs: vec![],
            },
            Node {
                name: "a".into(),
                kind: NodeKind::Relu,
                inputs: vec![NodeId(2)],
            },
            Node {
                name: "b".into(),
                kind: NodeKind::Relu,
                inputs: vec![NodeId(1)],
            },
            Node {
                name: "out".into(),
                kind: NodeKind::Output,
                inputs: vec![NodeId(2)],
            },
        ];
        let g = Graph::new(nodes, NodeId(0), NodeId(3)).unwrap();
        assert!(g.topo_order().is_none());
        assert!(g
            .validate()
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. })));
    }

    #[test]
    fn arity_violation() {
        let nodes = vec![
            Node {
                name: "in".into(),
                kind: NodeKind::Input {
                    shape: TensorShape::vector(1),
                },
                inputs: vec![],
            },
            Node {
                name: "add".into(),
                kind: NodeKind::Add,
                inputs: vec![NodeId(0)],
            },
            Node {
                name: "out".into(),
                kind: NodeKind::Output,
                inputs: vec![NodeId(1)],
            },
        ];
        let g = Graph::new(nodes, NodeId(0), NodeId(2)).unwrap();
        assert!(matches!(
            g.validate().violations[0],
            Violation::Arity {
                expected: 2,
                found: 1,
                ..
            }
        ));
    }

    #[test]
    fn forward_linear() {
        let g = single_linear();
        let y = g.forward(&Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[-0.5]);
    }

    #[test]
    fn forward_relu_and_pool() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let r = b.relu(x);
        b.output(r);
        let g = b.build_valid().unwrap();
        let y = g
            .forward(&Tensor::vector(vec![-1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);

        let mut b = GraphBuilder::new();
        let x = b.input(&[4]);
        let p = b.maxpool(x, MaxPool::new(vec![4]));
        b.output(p);
        let g = b.build_valid().unwrap();
        let y = g
            .forward(&Tensor::vector(vec![1.0, 4.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let g = single_linear();
        assert!(matches!(
            g.forward(&Tensor::vector(vec![1.0]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn topo_is_consistent_with_edges() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let r = b.relu(x);
        let s = b.sub(x, r);
        let a = b.add(s, r);
        b.output(a);
        let g = b.build_valid().unwrap();
        let order = g.topo_order().unwrap();
        let pos: Vec<usize> = {
            let mut p = vec![0; g.len()];
            for (i, id) in order.iter().enumerate() {
                p[id.0] = i;
            }
            p
        };
        for id in g.ids() {
            for inp in &g.node(id).inputs {
                assert!(pos[inp.0] < pos[id.0]);
            }
        }
    }

    #[test]
    fn pool_windows_2d() {
        let shape = TensorShape::new(vec![1, 4, 4]).unwrap();
        let (out, w) = pool_windows(&shape, &MaxPool::new(vec![2, 2])).unwrap();
        assert_eq!(out.dims(), &[1, 2, 2]);
        assert_eq!(w[0], vec![0, 1, 4, 5]);
        assert_eq!(w[3], vec![10, 11, 14, 15]);
    }
}
