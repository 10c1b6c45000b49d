//! Quantized DNN dataflow graph: tensor and node types, the on-disk JSON
//! format, structural validation, shape inference and deterministic
//! topological ordering.
//!
//! Activations are laid out channel-major, then rows, then columns (C-y-x).
//! Conv weights are `[K, C, Fy, Fx]`, dense weights `[K, C]`, bias `[K]`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

// ── Scalar types ─────────────────────────────────────────────────────

/// Element type of a tensor. Ternary tensors carry only -1, 0, +1 and are
/// packed to 2 bits per value once they reach a weight image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    I8,
    I32,
    Ternary,
}

impl DataType {
    /// Bytes per element when the tensor lives in main memory as an
    /// activation. Ternary activations do not occur; constants keep one
    /// byte per value until a weight image packs them.
    pub fn activation_bytes(self) -> usize {
        match self {
            DataType::I8 | DataType::Ternary => 1,
            DataType::I32 => 4,
        }
    }

    /// Bits per element when stored as accelerator weights.
    pub fn weight_bits(self) -> usize {
        match self {
            DataType::I8 => 8,
            DataType::I32 => 32,
            DataType::Ternary => 2,
        }
    }

    pub fn in_range(self, v: i32) -> bool {
        match self {
            DataType::I8 => (-128..=127).contains(&v),
            DataType::I32 => true,
            DataType::Ternary => (-1..=1).contains(&v),
        }
    }

    fn parse(s: &str) -> Option<DataType> {
        match s {
            "i8" => Some(DataType::I8),
            "i32" => Some(DataType::I32),
            "ternary" => Some(DataType::Ternary),
            _ => None,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataType::I8 => write!(f, "i8"),
            DataType::I32 => write!(f, "i32"),
            DataType::Ternary => write!(f, "ternary"),
        }
    }
}

/// Operator kinds understood by the compiler and the reference interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    DepthwiseConv2d,
    Dense,
    BiasAdd,
    RightShift,
    Clip,
    Cast,
    Add,
    AvgPool2d,
    MaxPool2d,
    Softmax,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::Dense,
        OpKind::BiasAdd,
        OpKind::RightShift,
        OpKind::Clip,
        OpKind::Cast,
        OpKind::Add,
        OpKind::AvgPool2d,
        OpKind::MaxPool2d,
        OpKind::Softmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::Dense => "dense",
            OpKind::BiasAdd => "bias_add",
            OpKind::RightShift => "right_shift",
            OpKind::Clip => "clip",
            OpKind::Cast => "cast",
            OpKind::Add => "add",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::Softmax => "softmax",
        }
    }

    fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── Graph structure ──────────────────────────────────────────────────

/// Per-op attributes. Only the fields relevant to a node's op are set;
/// the canonical JSON form omits the rest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Attrs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    /// Right-shift amount for requantization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amount: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<i32>,
    /// Cast target type.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DataType>,
    /// Pooling window (square).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

impl Attrs {
    pub fn is_empty(&self) -> bool {
        *self == Attrs::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// Dims are positive. Omitted in input documents for intermediates;
    /// filled by shape inference.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub shape: Option<Vec<usize>>,
    pub dtype: DataType,
    /// Constant payload, flat in row-major / C-y-x order.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub data: Option<Vec<i32>>,
}

impl TensorSpec {
    pub fn elem_count(&self) -> Option<usize> {
        self.shape.as_ref().map(|s| s.iter().product())
    }

    pub fn is_constant(&self) -> bool {
        self.data.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    pub output: String,
    #[serde(skip_serializing_if = "Attrs::is_empty")]
    #[serde(default)]
    pub attrs: Attrs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub tensors: Vec<TensorSpec>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Graph {
    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut TensorSpec> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Node producing the given tensor, if any.
    pub fn producer(&self, tensor: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.output == tensor)
    }

    /// All nodes consuming the given tensor.
    pub fn consumers(&self, tensor: &str) -> Vec<&Node> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == tensor)).collect()
    }

    pub fn is_graph_output(&self, tensor: &str) -> bool {
        self.outputs.iter().any(|o| o == tensor)
    }
}

// ── Errors and diagnostics ───────────────────────────────────────────

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("SyntaxError: {0}")]
    Syntax(String),
    #[error("SchemaError: {entity}: {detail}")]
    Schema { entity: String, detail: String },
    #[error("ShapeError: {entity}: {detail}")]
    Shape { entity: String, detail: String },
    #[error("CyclicGraph: cycle through node `{0}`")]
    Cyclic(String),
}

impl GraphError {
    pub fn schema(entity: impl Into<String>, detail: impl Into<String>) -> GraphError {
        GraphError::Schema { entity: entity.into(), detail: detail.into() }
    }

    pub fn shape(entity: impl Into<String>, detail: impl Into<String>) -> GraphError {
        GraphError::Shape { entity: entity.into(), detail: detail.into() }
    }
}

/// Stable machine-readable validation codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagCode {
    UnknownTensor,
    MultipleProducers,
    UnproducedOutput,
    CyclicGraph,
    InvalidTernaryValue,
    InvalidI8Value,
    PayloadLengthMismatch,
    BadDim,
    BadDepthwiseShape,
    BadAttr,
    BadDtype,
    MissingShape,
    SoftmaxNotTerminal,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub code: DiagCode,
    /// Node or tensor the diagnostic refers to.
    pub entity: String,
    pub message: String,
}

impl Diagnostic {
    fn new(code: DiagCode, entity: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { code, entity: entity.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at `{}`: {}", self.code, self.entity, self.message)
    }
}

// ── Parsing ──────────────────────────────────────────────────────────
//
// Parsing is two-stage: serde handles JSON syntax and the document layout,
// then a conversion pass resolves op and dtype strings so errors can name
// the offending node or tensor.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    tensors: Vec<RawTensor>,
    nodes: Vec<RawNode>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    name: String,
    #[serde(default)]
    shape: Option<Vec<usize>>,
    dtype: String,
    #[serde(default)]
    data: Option<Vec<i32>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    op: String,
    inputs: Vec<String>,
    output: String,
    #[serde(default)]
    attrs: Option<RawAttrs>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAttrs {
    #[serde(default)]
    stride: Option<usize>,
    #[serde(default)]
    padding: Option<usize>,
    #[serde(default)]
    amount: Option<u32>,
    #[serde(default)]
    min: Option<i32>,
    #[serde(default)]
    max: Option<i32>,
    #[serde(default)]
    dtype: Option<String>,
    #[serde(default)]
    window: Option<usize>,
}

/// Parse a graph document. Syntax problems surface as `SyntaxError`,
/// unresolved names and bad enum strings as `SchemaError` naming the
/// node or tensor involved.
pub fn parse_graph(text: &str) -> Result<Graph, GraphError> {
    let raw: RawGraph = serde_json::from_str(text).map_err(classify_serde_error)?;

    let mut tensors = Vec::with_capacity(raw.tensors.len());
    for t in raw.tensors {
        let dtype = DataType::parse(&t.dtype).ok_or_else(|| {
            GraphError::schema(format!("tensor `{}`", t.name), format!("unknown dtype `{}`", t.dtype))
        })?;
        tensors.push(TensorSpec { name: t.name, shape: t.shape, dtype, data: t.data });
    }

    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for n in raw.nodes {
        let op = OpKind::parse(&n.op).ok_or_else(|| {
            GraphError::schema(format!("node `{}`", n.id), format!("unknown op `{}`", n.op))
        })?;
        let ra = n.attrs.unwrap_or_default();
        let cast_dtype = match ra.dtype {
            None => None,
            Some(s) => Some(DataType::parse(&s).ok_or_else(|| {
                GraphError::schema(format!("node `{}`", n.id), format!("unknown dtype `{s}` in attrs"))
            })?),
        };
        nodes.push(Node {
            id: n.id,
            op,
            inputs: n.inputs,
            output: n.output,
            attrs: Attrs {
                stride: ra.stride,
                padding: ra.padding,
                amount: ra.amount,
                min: ra.min,
                max: ra.max,
                dtype: cast_dtype,
                window: ra.window,
            },
        });
    }

    let graph = Graph { tensors, nodes, inputs: raw.inputs, outputs: raw.outputs };

    // Name resolution is a schema-level guarantee; later passes rely on it.
    for node in &graph.nodes {
        for input in &node.inputs {
            let known = graph.tensor(input).is_some();
            if !known {
                return Err(GraphError::schema(
                    format!("node `{}`", node.id),
                    format!("references undefined tensor `{input}`"),
                ));
            }
        }
        if graph.tensor(&node.output).is_none() {
            return Err(GraphError::schema(
                format!("node `{}`", node.id),
                format!("output tensor `{}` is not declared", node.output),
            ));
        }
    }
    for name in graph.inputs.iter().chain(graph.outputs.iter()) {
        if graph.tensor(name).is_none() {
            return Err(GraphError::schema(
                format!("tensor `{name}`"),
                "listed as graph input/output but not declared",
            ));
        }
    }
    Ok(graph)
}

fn classify_serde_error(e: serde_json::Error) -> GraphError {
    if e.is_syntax() || e.is_eof() {
        GraphError::Syntax(e.to_string())
    } else {
        GraphError::Schema { entity: "document".into(), detail: e.to_string() }
    }
}

/// Canonical serialization: pretty JSON with fixed field order and all
/// optional fields omitted when absent. `parse_graph` of the result is
/// the identity.
pub fn serialize_graph(g: &Graph) -> String {
    let mut s = serde_json::to_string_pretty(g).expect("graph serialization cannot fail");
    s.push('\n');
    s
}

// ── Topological order ────────────────────────────────────────────────

/// Deterministic topological order: every node appears after all its
/// producers, ties broken by lexicographic node id.
pub fn topological_order(g: &Graph) -> Result<Vec<usize>, GraphError> {
    let producer_of: HashMap<&str, usize> =
        g.nodes.iter().enumerate().map(|(i, n)| (n.output.as_str(), i)).collect();

    // indegree counts only edges coming from other nodes
    let mut indegree = vec![0usize; g.nodes.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        for input in &node.inputs {
            if let Some(&p) = producer_of.get(input.as_str()) {
                indegree[i] += 1;
                dependents[p].push(i);
            }
        }
    }

    let mut ready: BTreeSet<(&str, usize)> = g
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| indegree[*i] == 0)
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();

    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(&(id, i)) = ready.iter().next() {
        ready.remove(&(id, i));
        order.push(i);
        for &d in &dependents[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.insert((g.nodes[d].id.as_str(), d));
            }
        }
    }

    if order.len() != g.nodes.len() {
        let stuck = g
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] > 0)
            .map(|(_, n)| n.id.clone())
            .min()
            .unwrap_or_default();
        return Err(GraphError::Cyclic(stuck));
    }
    Ok(order)
}

// ── Validation ───────────────────────────────────────────────────────

/// Structural validation. Returns an empty list iff the graph satisfies
/// every type invariant; diagnostics carry stable codes and the id of the
/// node or tensor at fault.
pub fn validate(g: &Graph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    for t in &g.tensors {
        if let Some(shape) = &t.shape {
            if shape.iter().any(|&d| d == 0) {
                diags.push(Diagnostic::new(
                    DiagCode::BadDim,
                    &t.name,
                    format!("shape {shape:?} has a zero dim"),
                ));
            }
            if let Some(data) = &t.data {
                let want: usize = shape.iter().product();
                if data.len() != want {
                    diags.push(Diagnostic::new(
                        DiagCode::PayloadLengthMismatch,
                        &t.name,
                        format!("payload has {} values, shape wants {want}", data.len()),
                    ));
                }
            }
        } else if t.data.is_some() {
            diags.push(Diagnostic::new(DiagCode::MissingShape, &t.name, "constant without shape"));
        }
        if let Some(data) = &t.data {
            if let Some(bad) = data.iter().find(|&&v| !t.dtype.in_range(v)) {
                let code = match t.dtype {
                    DataType::Ternary => DiagCode::InvalidTernaryValue,
                    _ => DiagCode::InvalidI8Value,
                };
                diags.push(Diagnostic::new(
                    code,
                    &t.name,
                    format!("value {bad} out of range for {}", t.dtype),
                ));
            }
        }
    }

    for name in &g.inputs {
        if let Some(t) = g.tensor(name) {
            if t.shape.is_none() {
                diags.push(Diagnostic::new(DiagCode::MissingShape, name, "graph input without shape"));
            }
        }
    }

    // single producer per tensor, and constants are not produced
    let mut producers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in &g.nodes {
        producers.entry(n.output.as_str()).or_default().push(n.id.as_str());
    }
    for (tensor, who) in &producers {
        if who.len() > 1 {
            diags.push(Diagnostic::new(
                DiagCode::MultipleProducers,
                *tensor,
                format!("produced by nodes {who:?}"),
            ));
        }
        if let Some(t) = g.tensor(tensor) {
            if t.is_constant() {
                diags.push(Diagnostic::new(
                    DiagCode::MultipleProducers,
                    *tensor,
                    "constant tensor also produced by a node",
                ));
            }
        }
    }

    for out in &g.outputs {
        let produced = producers.contains_key(out.as_str()) || g.inputs.contains(out);
        if !produced {
            diags.push(Diagnostic::new(DiagCode::UnproducedOutput, out, "graph output has no producer"));
        }
    }

    if let Err(GraphError::Cyclic(id)) = topological_order(g) {
        diags.push(Diagnostic::new(DiagCode::CyclicGraph, id, "dataflow cycle"));
    }

    for n in &g.nodes {
        diags.extend(validate_node_attrs(g, n));
    }

    diags
}

fn validate_node_attrs(g: &Graph, n: &Node) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let bad = |msg: String| Diagnostic::new(DiagCode::BadAttr, &n.id, msg);
    let arity = |want: usize| n.inputs.len() == want;

    match n.op {
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            if !arity(2) {
                diags.push(bad(format!("{} wants [input, weights], got {} inputs", n.op, n.inputs.len())));
                return diags;
            }
            if n.attrs.stride.map_or(true, |s| s == 0) {
                diags.push(bad("stride must be >= 1".into()));
            }
            if n.attrs.padding.is_none() {
                diags.push(bad("padding attr required".into()));
            }
            let weights = g.tensor(&n.inputs[1]);
            if let Some(w) = weights {
                if let Some(shape) = &w.shape {
                    if n.op == OpKind::DepthwiseConv2d {
                        if shape.len() != 4 || shape[1] != 1 {
                            diags.push(Diagnostic::new(
                                DiagCode::BadDepthwiseShape,
                                &w.name,
                                format!("depthwise weights must be [C,1,Fy,Fx], got {shape:?}"),
                            ));
                        }
                    } else if shape.len() != 4 {
                        diags.push(bad(format!("conv weights must be rank 4, got {shape:?}")));
                    }
                }
                if w.dtype == DataType::I32 {
                    diags.push(Diagnostic::new(DiagCode::BadDtype, &w.name, "conv weights must be i8 or ternary"));
                }
            }
        }
        OpKind::Dense => {
            if !arity(2) {
                diags.push(bad("dense wants [input, weights]".into()));
            }
        }
        OpKind::BiasAdd | OpKind::Add => {
            if !arity(2) {
                diags.push(bad(format!("{} wants 2 inputs", n.op)));
            }
        }
        OpKind::RightShift => {
            if !arity(1) {
                diags.push(bad("right_shift wants 1 input".into()));
            }
            if n.attrs.amount.is_none() {
                diags.push(bad("amount attr required".into()));
            }
        }
        OpKind::Clip => {
            match (n.attrs.min, n.attrs.max) {
                (Some(lo), Some(hi)) if lo <= hi => {}
                _ => diags.push(bad("clip wants min <= max".into())),
            }
            if !arity(1) {
                diags.push(bad("clip wants 1 input".into()));
            }
        }
        OpKind::Cast => {
            if n.attrs.dtype.is_none() {
                diags.push(bad("cast wants a target dtype".into()));
            }
            if let (Some(want), Some(t)) = (n.attrs.dtype, g.tensor(&n.output)) {
                if t.dtype != want {
                    diags.push(Diagnostic::new(
                        DiagCode::BadDtype,
                        &n.id,
                        format!("cast target {want} but output tensor is {}", t.dtype),
                    ));
                }
            }
        }
        OpKind::AvgPool2d | OpKind::MaxPool2d => {
            if n.attrs.window.map_or(true, |w| w == 0) || n.attrs.stride.map_or(true, |s| s == 0) {
                diags.push(bad("pool wants window >= 1 and stride >= 1".into()));
            }
        }
        OpKind::Softmax => {
            // Softmax output is float-valued at execution time; it cannot
            // feed integer ops and must be a graph output.
            let consumed = !g.consumers(&n.output).is_empty();
            if consumed || !g.is_graph_output(&n.output) {
                diags.push(Diagnostic::new(
                    DiagCode::SoftmaxNotTerminal,
                    &n.id,
                    "softmax output must be a graph output and feed nothing",
                ));
            }
        }
    }
    diags
}

// ── Shape inference ──────────────────────────────────────────────────

pub fn conv_out_dim(i: usize, pad: usize, f: usize, s: usize) -> Option<usize> {
    let span = i + 2 * pad;
    if span < f {
        return None;
    }
    Some((span - f) / s + 1)
}

/// Infer all intermediate shapes. Requires graph-input and constant shapes
/// to be present; fails with `ShapeError` on inconsistent operands or
/// degenerate derived dims.
pub fn infer_shapes(g: &Graph) -> Result<Graph, GraphError> {
    let mut g = g.clone();
    let order = topological_order(&g)?;

    for idx in order {
        let node = g.nodes[idx].clone();
        let out_shape = infer_node_shape(&g, &node)?;
        let declared = g.tensor(&node.output).and_then(|t| t.shape.clone());
        if let Some(d) = declared {
            if d != out_shape {
                return Err(GraphError::shape(
                    format!("node `{}`", node.id),
                    format!("declared output shape {d:?} but inferred {out_shape:?}"),
                ));
            }
        } else {
            g.tensor_mut(&node.output).unwrap().shape = Some(out_shape);
        }
    }
    Ok(g)
}

fn shape_of<'a>(g: &'a Graph, name: &str, ctx: &str) -> Result<&'a [usize], GraphError> {
    g.tensor(name)
        .and_then(|t| t.shape.as_deref())
        .ok_or_else(|| GraphError::shape(format!("node `{ctx}`"), format!("shape of `{name}` unknown")))
}

fn infer_node_shape(g: &Graph, n: &Node) -> Result<Vec<usize>, GraphError> {
    let ctx = n.id.as_str();
    let err = |detail: String| GraphError::shape(format!("node `{ctx}`"), detail);
    match n.op {
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            let input = shape_of(g, &n.inputs[0], ctx)?;
            let w = shape_of(g, &n.inputs[1], ctx)?;
            if input.len() != 3 || w.len() != 4 {
                return Err(err(format!("conv wants [C,H,W] x [K,C,Fy,Fx], got {input:?} x {w:?}")));
            }
            let (c, iy, ix) = (input[0], input[1], input[2]);
            let (k, wc, fy, fx) = (w[0], w[1], w[2], w[3]);
            let s = n.attrs.stride.unwrap_or(1);
            let p = n.attrs.padding.unwrap_or(0);
            if n.op == OpKind::DepthwiseConv2d {
                if wc != 1 || k != c {
                    return Err(err(format!("depthwise weights [C,1,Fy,Fx] with C={c}, got {w:?}")));
                }
            } else if wc != c {
                return Err(err(format!("weight C={wc} does not match input C={c}")));
            }
            let oy = conv_out_dim(iy, p, fy, s);
            let ox = conv_out_dim(ix, p, fx, s);
            match (oy, ox) {
                (Some(oy), Some(ox)) if oy >= 1 && ox >= 1 => Ok(vec![k, oy, ox]),
                _ => Err(err(format!("derived output dim < 1 for input {input:?}, kernel {fy}x{fx}"))),
            }
        }
        OpKind::Dense => {
            let input = shape_of(g, &n.inputs[0], ctx)?;
            let w = shape_of(g, &n.inputs[1], ctx)?;
            if w.len() != 2 {
                return Err(err(format!("dense weights must be [K,C], got {w:?}")));
            }
            let c_in: usize = input.iter().product();
            let only_unit_spatial = input.len() == 1 || input.iter().skip(1).all(|&d| d == 1);
            if !only_unit_spatial || c_in != w[1] {
                return Err(err(format!("dense input {input:?} does not match weights {w:?}")));
            }
            Ok(vec![w[0]])
        }
        OpKind::BiasAdd => {
            let input = shape_of(g, &n.inputs[0], ctx)?;
            let bias = shape_of(g, &n.inputs[1], ctx)?;
            if bias.len() != 1 || bias[0] != input[0] {
                return Err(err(format!("bias {bias:?} does not match channel dim of {input:?}")));
            }
            Ok(input.to_vec())
        }
        OpKind::RightShift | OpKind::Clip | OpKind::Cast | OpKind::Softmax => {
            Ok(shape_of(g, &n.inputs[0], ctx)?.to_vec())
        }
        OpKind::Add => {
            let a = shape_of(g, &n.inputs[0], ctx)?;
            let b = shape_of(g, &n.inputs[1], ctx)?;
            if a != b {
                return Err(err(format!("add operands disagree: {a:?} vs {b:?}")));
            }
            Ok(a.to_vec())
        }
        OpKind::AvgPool2d | OpKind::MaxPool2d => {
            let input = shape_of(g, &n.inputs[0], ctx)?;
            if input.len() != 3 {
                return Err(err(format!("pool wants [C,H,W], got {input:?}")));
            }
            let w = n.attrs.window.unwrap_or(1);
            let s = n.attrs.stride.unwrap_or(1);
            let oy = conv_out_dim(input[1], 0, w, s);
            let ox = conv_out_dim(input[2], 0, w, s);
            match (oy, ox) {
                (Some(oy), Some(ox)) if oy >= 1 && ox >= 1 => Ok(vec![input[0], oy, ox]),
                _ => Err(err(format!("pool window {w} larger than input {input:?}"))),
            }
        }
    }
}

// ── Constant folding ─────────────────────────────────────────────────

/// Fold cast/clip chains whose input is a constant tensor. Anything more
/// aggressive is out of scope for this front end.
pub fn fold_constants(g: &Graph) -> Graph {
    let mut g = g.clone();
    loop {
        let candidate = g.nodes.iter().position(|n| {
            matches!(n.op, OpKind::Cast | OpKind::Clip)
                && g.tensor(&n.inputs[0]).map_or(false, |t| t.is_constant())
                && !g.is_graph_output(&n.inputs[0])
        });
        let Some(idx) = candidate else { break };
        let node = g.nodes[idx].clone();
        let src = g.tensor(&n0(&node)).unwrap().clone();
        let data = src.data.as_ref().unwrap();
        let folded: Vec<i32> = match node.op {
            OpKind::Clip => {
                let lo = node.attrs.min.unwrap_or(i32::MIN);
                let hi = node.attrs.max.unwrap_or(i32::MAX);
                data.iter().map(|&v| v.clamp(lo, hi)).collect()
            }
            OpKind::Cast => match node.attrs.dtype.unwrap_or(DataType::I32) {
                DataType::I8 => data.iter().map(|&v| v as i8 as i32).collect(),
                DataType::I32 => data.clone(),
                DataType::Ternary => data.iter().map(|&v| v.clamp(-1, 1)).collect(),
            },
            _ => unreachable!(),
        };
        let out = g.tensor_mut(&node.output).unwrap();
        out.shape = out.shape.clone().or(src.shape);
        out.data = Some(folded);
        g.nodes.remove(idx);
        // drop the source constant if nothing references it anymore
        let src_name = node.inputs[0].clone();
        let still_used = g.nodes.iter().any(|n| n.inputs.contains(&src_name))
            || g.inputs.contains(&src_name)
            || g.outputs.contains(&src_name);
        if !still_used {
            g.tensors.retain(|t| t.name != src_name);
        }
    }
    g
}

fn n0(n: &Node) -> String {
    n.inputs[0].clone()
}

/// Tensors reachable as inputs of any node, plus graph inputs/outputs.
pub fn referenced_tensors(g: &Graph) -> HashSet<String> {
    let mut set: HashSet<String> = g.inputs.iter().cloned().collect();
    set.extend(g.outputs.iter().cloned());
    for n in &g.nodes {
        set.extend(n.inputs.iter().cloned());
        set.insert(n.output.clone());
    }
    set
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_conv_graph() -> &'static str {
        r#"{
  "tensors": [
    {"name": "input", "shape": [16, 32, 32], "dtype": "i8"},
    {"name": "w", "shape": [8, 16, 3, 3], "dtype": "i8", "data": null},
    {"name": "out", "dtype": "i32"}
  ],
  "nodes": [
    {"id": "conv", "op": "conv2d", "inputs": ["input", "w"], "output": "out",
     "attrs": {"stride": 1, "padding": 1}}
  ],
  "inputs": ["input"],
  "outputs": ["out"]
}"#
    }

    #[test]
    fn parses_minimal_graph() {
        let g = parse_graph(minimal_conv_graph()).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].op, OpKind::Conv2d);
    }

    #[test]
    fn dangling_reference_names_tensor() {
        let text = minimal_conv_graph().replace("\"w\"]", "\"t9\"]");
        let err = parse_graph(&text).unwrap_err();
        match err {
            GraphError::Schema { detail, .. } => assert!(detail.contains("t9"), "{detail}"),
            other => panic!("expected SchemaError, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_syntax_error() {
        assert!(matches!(parse_graph("{not json"), Err(GraphError::Syntax(_))));
    }

    #[test]
    fn unknown_op_is_schema_error() {
        let text = minimal_conv_graph().replace("conv2d", "conv3d");
        match parse_graph(&text) {
            Err(GraphError::Schema { entity, detail }) => {
                assert!(entity.contains("conv"), "{entity}");
                assert!(detail.contains("conv3d"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let g = parse_graph(minimal_conv_graph()).unwrap();
        let g = infer_shapes(&g).unwrap();
        let text = serialize_graph(&g);
        let g2 = parse_graph(&text).unwrap();
        assert_eq!(g, g2);
        assert_eq!(text, serialize_graph(&g2));
    }

    #[test]
    fn conv_same_padding_shape() {
        let g = parse_graph(minimal_conv_graph()).unwrap();
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor("out").unwrap().shape, Some(vec![8, 32, 32]));
    }

    #[test]
    fn conv_strided_shape() {
        let text = minimal_conv_graph().replace("\"stride\": 1", "\"stride\": 2");
        let g = infer_shapes(&parse_graph(&text).unwrap()).unwrap();
        assert_eq!(g.tensor("out").unwrap().shape, Some(vec![8, 16, 16]));
    }

    #[test]
    fn conv_degenerate_dim_errors() {
        let g = Graph {
            tensors: vec![
                TensorSpec { name: "x".into(), shape: Some(vec![3, 2, 2]), dtype: DataType::I8, data: None },
                TensorSpec { name: "w".into(), shape: Some(vec![4, 3, 5, 5]), dtype: DataType::I8, data: None },
                TensorSpec { name: "y".into(), shape: None, dtype: DataType::I32, data: None },
            ],
            nodes: vec![Node {
                id: "conv".into(),
                op: OpKind::Conv2d,
                inputs: vec!["x".into(), "w".into()],
                output: "y".into(),
                attrs: Attrs { stride: Some(1), padding: Some(0), ..Attrs::default() },
            }],
            inputs: vec!["x".into()],
            outputs: vec!["y".into()],
        };
        assert!(matches!(infer_shapes(&g), Err(GraphError::Shape { .. })));
    }

    #[test]
    fn infer_is_idempotent() {
        let g = infer_shapes(&parse_graph(minimal_conv_graph()).unwrap()).unwrap();
        let g2 = infer_shapes(&g).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn validate_catches_bad_ternary_value() {
        let mut g = parse_graph(minimal_conv_graph()).unwrap();
        g.tensors.push(TensorSpec {
            name: "tw".into(),
            shape: Some(vec![2]),
            dtype: DataType::Ternary,
            data: Some(vec![1, 2]),
        });
        let diags = validate(&g);
        assert!(diags.iter().any(|d| d.code == DiagCode::InvalidTernaryValue && d.entity == "tw"));
    }

    #[test]
    fn validate_catches_cycle() {
        let mk = |name: &str| TensorSpec { name: name.into(), shape: Some(vec![1]), dtype: DataType::I32, data: None };
        let g = Graph {
            tensors: vec![mk("ta"), mk("tb")],
            nodes: vec![
                Node {
                    id: "a".into(),
                    op: OpKind::RightShift,
                    inputs: vec!["tb".into()],
                    output: "ta".into(),
                    attrs: Attrs { amount: Some(0), ..Attrs::default() },
                },
                Node {
                    id: "b".into(),
                    op: OpKind::RightShift,
                    inputs: vec!["ta".into()],
                    output: "tb".into(),
                    attrs: Attrs { amount: Some(0), ..Attrs::default() },
                },
            ],
            inputs: vec![],
            outputs: vec!["tb".into()],
        };
        let diags = validate(&g);
        assert!(diags.iter().any(|d| d.code == DiagCode::CyclicGraph));
    }

    #[test]
    fn topo_diamond_tiebreak_by_id() {
        let act = |name: &str| TensorSpec { name: name.into(), shape: Some(vec![4]), dtype: DataType::I8, data: None };
        let shift = |id: &str, input: &str, output: &str| Node {
            id: id.into(),
            op: OpKind::RightShift,
            inputs: vec![input.into()],
            output: output.into(),
            attrs: Attrs { amount: Some(0), ..Attrs::default() },
        };
        let g = Graph {
            tensors: vec![act("t_in"), act("t_a"), act("t_b"), act("t_c"), act("t_out")],
            nodes: vec![
                Node {
                    id: "z_add".into(),
                    op: OpKind::Add,
                    inputs: vec!["t_b".into(), "t_c".into()],
                    output: "t_out".into(),
                    attrs: Attrs::default(),
                },
                shift("c", "t_a", "t_c"),
                shift("b", "t_a", "t_b"),
                shift("a", "t_in", "t_a"),
            ],
            inputs: vec!["t_in".into()],
            outputs: vec!["t_out".into()],
        };
        let order = topological_order(&g).unwrap();
        let ids: Vec<&str> = order.iter().map(|&i| g.nodes[i].id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c", "z_add"]);
        // determinism across runs
        for _ in 0..5 {
            let again: Vec<&str> =
                topological_order(&g).unwrap().iter().map(|&i| g.nodes[i].id.as_str()).collect();
            assert_eq!(ids, again);
        }
    }

    #[test]
    fn topo_respects_all_edges() {
        let g = infer_shapes(&parse_graph(minimal_conv_graph()).unwrap()).unwrap();
        let order = topological_order(&g).unwrap();
        let pos: HashMap<&str, usize> =
            order.iter().enumerate().map(|(p, &i)| (g.nodes[i].output.as_str(), p)).collect();
        for (p, &i) in order.iter().enumerate() {
            for input in &g.nodes[i].inputs {
                if let Some(&src) = pos.get(input.as_str()) {
                    assert!(src < p);
                }
            }
        }
    }

    #[test]
    fn fold_clip_over_constant() {
        let mut g = parse_graph(minimal_conv_graph()).unwrap();
        g.tensors.push(TensorSpec {
            name: "c_in".into(),
            shape: Some(vec![3]),
            dtype: DataType::I32,
            data: Some(vec![-500, 3, 500]),
        });
        g.tensors.push(TensorSpec { name: "c_out".into(), shape: Some(vec![3]), dtype: DataType::I32, data: None });
        g.nodes.push(Node {
            id: "fold_me".into(),
            op: OpKind::Clip,
            inputs: vec!["c_in".into()],
            output: "c_out".into(),
            attrs: Attrs { min: Some(-128), max: Some(127), ..Attrs::default() },
        });
        g.outputs.push("c_out".into());
        let folded = fold_constants(&g);
        assert!(folded.node("fold_me").is_none());
        assert_eq!(folded.tensor("c_out").unwrap().data, Some(vec![-128, 3, 127]));
        assert!(folded.tensor("c_in").is_none());
    }
}
