//! Graph model format: a JSON manifest describing nodes plus one raw
//! little-endian file per tensor, stored next to the manifest.
//!
//! ```json
//! {
//!   "format": "gmf", "version": "1", "dtype": "f32", "input": 0, "output": 3,
//!   "nodes": [
//!     {"id": 0, "name": "x", "kind": "input", "inputs": [], "shape": [2]},
//!     {"id": 1, "name": "fc", "kind": "linear", "inputs": [0], "shape": [1],
//!      "attributes": {},
//!      "tensors": {"weight": {"path": "m.1.weight.bin", "dtype": "f32",
//!                             "shape": [1, 2], "elements": 2, "sha256": "…"},
//!                  "bias": {…}}},
//!     …
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{
    Conv2d, DType, Graph, MaxPool, Node, NodeId, NodeKind, PaddingMode, Tensor, TensorShape,
};

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub path: String,
    pub dtype: DType,
    pub shape: TensorShape,
    pub elements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: usize,
    pub name: String,
    pub kind: String,
    pub inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<TensorShape>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub attributes: Map<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, TensorDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmfManifest {
    pub format: String,
    pub version: String,
    pub dtype: DType,
    pub input: usize,
    pub output: usize,
    pub nodes: Vec<NodeEntry>,
}

fn encode(data: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.width());
    for &v in data {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn attr<T: for<'de> Deserialize<'de>>(entry: &NodeEntry, key: &str) -> Result<T> {
    let v = entry.attributes.get(key).ok_or_else(|| {
        Error::Format(format!(
            "node {} ({}) lacks attribute `{key}`",
            entry.id, entry.kind
        ))
    })?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Format(format!("node {} attribute `{key}`: {e}", entry.id)))
}

fn read_tensor(dir: &Path, entry: &NodeEntry, key: &str, dtype: DType) -> Result<Tensor> {
    let d = entry.tensors.get(key).ok_or_else(|| {
        Error::Format(format!(
            "node {} ({}) lacks tensor `{key}`",
            entry.id, entry.kind
        ))
    })?;
    if d.dtype != dtype {
        return Err(Error::Format(format!(
            "tensor `{key}` of node {} has dtype {:?}, model declares {:?}",
            entry.id, d.dtype, dtype
        )));
    }
    if d.elements != d.shape.numel() {
        return Err(Error::Format(format!(
            "tensor `{key}` of node {} declares {} elements for shape {}",
            entry.id, d.elements, d.shape
        )));
    }
    let path = dir.join(&d.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = d.elements * dtype.width();
    if bytes.len() != expected {
        return Err(Error::ByteLength {
            path,
            expected,
            found: bytes.len(),
        });
    }
    if let Some(sum) = &d.sha256 {
        if !sum.eq_ignore_ascii_case(&sha256_hex(&bytes)) {
            return Err(Error::Checksum { path });
        }
    }
    Tensor::new(d.shape.clone(), decode(&bytes, dtype))
}

fn node_kind(dir: &Path, e: &NodeEntry, dtype: DType) -> Result<NodeKind> {
    Ok(match e.kind.as_str() {
        "input" => NodeKind::Input {
            shape: attr::<TensorShape>(e, "shape")
                .or_else(|_| e.shape.clone().ok_or(()))
                .map_err(|_| Error::Format(format!("input node {} has no shape", e.id)))?,
        },
        "linear" => NodeKind::Linear {
            weight: read_tensor(dir, e, "weight", dtype)?,
            bias: read_tensor(dir, e, "bias", dtype)?,
            out_shape: match e.attributes.get("out_shape") {
                None | Some(Value::Null) => None,
                Some(_) => Some(attr(e, "out_shape")?),
            },
        },
        "conv2d" => NodeKind::Conv2d(Conv2d {
            kernel: read_tensor(dir, e, "kernel", dtype)?,
            bias: read_tensor(dir, e, "bias", dtype)?,
            stride: attr(e, "stride")?,
            padding: attr(e, "padding")?,
            padding_mode: attr::<PaddingMode>(e, "padding_mode")?,
        }),
        "maxpool" => NodeKind::MaxPool(MaxPool {
            window: attr(e, "window")?,
            stride: attr(e, "stride")?,
        }),
        "relu" => NodeKind::Relu,
        "add" => NodeKind::Add,
        "sub" => NodeKind::Sub,
        "output" => NodeKind::Output,
        other => {
            return Err(Error::Format(format!(
                "unknown node kind `{other}` (node {})",
                e.id
            )))
        }
    })
}

/// Reads a manifest and its tensors. The graph is returned even if it does
/// not validate; declared node shapes must match the inferred ones.
pub fn load_model(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: GmfManifest = serde_json::from_str(&text)?;
    if m.format != "gmf" {
        return Err(Error::Format(format!(
            "not a gmf manifest (format `{}`)",
            m.format
        )));
    }
    if m.version != FORMAT_VERSION {
        return Err(Error::Version(m.version));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for (i, e) in m.nodes.iter().enumerate() {
        if e.id != i {
            return Err(Error::Format(format!(
                "node ids must be 0..n in order; entry {i} has id {}",
                e.id
            )));
        }
        nodes.push(Node {
            name: e.name.clone(),
            kind: node_kind(dir, e, m.dtype)?,
            inputs: e.inputs.iter().map(|&p| NodeId(p)).collect(),
        });
    }
    let g = Graph::new(nodes, NodeId(m.input), NodeId(m.output))?.with_dtype(m.dtype);
    for e in &m.nodes {
        if let (Some(declared), Some(inferred)) = (&e.shape, g.shape(NodeId(e.id))) {
            if declared != inferred {
                return Err(Error::Shape(format!(
                    "node {} declares shape {declared}, inferred {inferred}",
                    e.id
                )));
            }
        }
    }
    Ok(g)
}

struct Writer<'a> {
    dir: &'a Path,
    stem: String,
    dtype: DType,
}

impl Writer<'_> {
    fn tensor(&self, id: usize, key: &str, t: &Tensor) -> Result<TensorDescriptor> {
        let file = format!("{}.{id}.{key}.bin", self.stem);
        let bytes = encode(t.data(), self.dtype);
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        Ok(TensorDescriptor {
            path: file,
            dtype: self.dtype,
            shape: t.shape().clone(),
            elements: t.numel(),
            sha256: Some(sha256_hex(&bytes)),
        })
    }
}

/// Writes `graph` as a manifest at `path` with tensor files beside it, in
/// the graph's dtype.
pub fn save_model(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let w = Writer {
        dir,
        stem,
        dtype: graph.dtype(),
    };
    let mut entries = Vec::with_capacity(graph.len());
    for id in graph.ids() {
        let node = graph.node(id);
        let mut attributes = Map::new();
        let mut tensors = BTreeMap::new();
        match &node.kind {
            NodeKind::Input { shape } => {
                attributes.insert("shape".into(), json!(shape));
            }
            NodeKind::Linear {
                weight,
                bias,
                out_shape,
            } => {
                if let Some(s) = out_shape {
                    attributes.insert("out_shape".into(), json!(s));
                }
                tensors.insert("weight".into(), w.tensor(id.0, "weight", weight)?);
                tensors.insert("bias".into(), w.tensor(id.0, "bias", bias)?);
            }
            NodeKind::Conv2d(c) => {
                attributes.insert("stride".into(), json!(c.stride));
                attributes.insert("padding".into(), json!(c.padding));
                attributes.insert("padding_mode".into(), json!(c.padding_mode));
                tensors.insert("kernel".into(), w.tensor(id.0, "kernel", &c.kernel)?);
                tensors.insert("bias".into(), w.tensor(id.0, "bias", &c.bias)?);
            }
            NodeKind::MaxPool(p) => {
                attributes.insert("window".into(), json!(p.window));
                attributes.insert("stride".into(), json!(p.stride));
            }
            NodeKind::Relu | NodeKind::Add | NodeKind::Sub | NodeKind::Output => {}
        }
        entries.push(NodeEntry {
            id: id.0,
            name: node.name.clone(),
            kind: node.kind.name().to_string(),
            inputs: node.inputs.iter().map(|p| p.0).collect(),
            shape: graph.shape(id).cloned(),
            attributes,
            tensors,
        });
    }
    let manifest = GmfManifest {
        format: "gmf".into(),
        version: FORMAT_VERSION.into(),
        dtype: graph.dtype(),
        input: graph.input().0,
        output: graph.output().0,
        nodes: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Paths of the tensor files a manifest references, resolved against its
/// directory.
pub fn tensor_paths(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: GmfManifest = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(m.nodes
        .iter()
        .flat_map(|n| n.tensors.values().map(|d| dir.join(&d.path)))
        .collect())
}
