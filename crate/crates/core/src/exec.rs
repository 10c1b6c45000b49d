//! Bit-exact execution.
//!
//! Two interpreters share the same integer semantics: `run_graph` walks the
//! graph node by node over whole tensors (the semantic ground truth), and
//! `run_schedule` executes the compiled tile/DMA schedule literally against
//! a simulated L2 byte array, fenced L1 buffers and packed weight images.
//! Agreement between the two, element for element, is the correctness
//! gate for the whole compiler.
//!
//! Requantization is an arithmetic right shift (floor), a clamp, and an i8
//! narrowing; fused ReLU is a second clamp after the cast. The analog path
//! additionally clips its inputs to 7 bits ([0, 127]) before the array.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::dispatch::RequantParams;
use crate::graph::{DataType, Graph, Node, OpKind};
use crate::platform::{AcceleratorKind, PatternKind};
use crate::schedule::{DmaTransfer, KernelCall, Schedule};
use crate::tile::LayerKind;

// ── Values ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(Vec<i32>),
    Float(Vec<f64>),
}

impl Value {
    pub fn as_int(&self) -> Option<&[i32]> {
        match self {
            Value::Int(v) => Some(v),
            Value::Float(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Value::Int(v) => v.len(),
            Value::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitSnapshot {
    pub unit: usize,
    pub tensor: String,
    pub value: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecResult {
    pub outputs: BTreeMap<String, Value>,
    pub trace: Vec<UnitSnapshot>,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error("DtypeError: {0}")]
    Dtype(String),
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("AddressFault: {0}")]
    AddressFault(String),
    #[error("CoverageFault: {0}")]
    CoverageFault(String),
    #[error("malformed schedule: {0}")]
    BadSchedule(String),
}

// ── Integer kernels ──────────────────────────────────────────────────

/// Arithmetic right shift (floor), clamp, i8 narrowing.
pub fn requant(acc: i32, shift: u32, clip_min: i32, clip_max: i32) -> i32 {
    (acc >> shift).clamp(clip_min, clip_max) as i8 as i32
}

fn apply_requant(acc: i32, rq: &RequantParams) -> i32 {
    let v = requant(acc, rq.shift, rq.clip_min, rq.clip_max);
    match rq.relu {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    }
}

/// Exact integer convolution with zero padding and i32 accumulation.
/// `clip7` models the analog path's 7-bit input precision.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_acc(
    input: &[i32],
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    weights: &[i32],
    out_ch: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    depthwise: bool,
    clip7: bool,
) -> Result<Vec<i32>, ExecError> {
    let out_h = crate::graph::conv_out_dim(in_h, pad, kernel_h, stride)
        .ok_or_else(|| ExecError::Shape("conv output height < 1".into()))?;
    let out_w = crate::graph::conv_out_dim(in_w, pad, kernel_w, stride)
        .ok_or_else(|| ExecError::Shape("conv output width < 1".into()))?;
    if input.len() != in_ch * in_h * in_w {
        return Err(ExecError::Shape(format!(
            "conv input has {} values, shape wants {}",
            input.len(),
            in_ch * in_h * in_w
        )));
    }
    let kernel = kernel_h * kernel_w;
    let mut out = vec![0i32; out_ch * out_h * out_w];
    for k in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0i32;
                let channels = if depthwise { k..k + 1 } else { 0..in_ch };
                for c in channels {
                    for fy in 0..kernel_h {
                        let gy = (oy * stride + fy) as isize - pad as isize;
                        if gy < 0 || gy >= in_h as isize {
                            continue;
                        }
                        for fx in 0..kernel_w {
                            let gx = (ox * stride + fx) as isize - pad as isize;
                            if gx < 0 || gx >= in_w as isize {
                                continue;
                            }
                            let mut x = input[(c * in_h + gy as usize) * in_w + gx as usize];
                            if clip7 {
                                x = x.clamp(0, 127);
                            }
                            let w = if depthwise {
                                weights[k * kernel + fy * kernel_w + fx]
                            } else {
                                weights[(k * in_ch + c) * kernel + fy * kernel_w + fx]
                            };
                            acc += x * w;
                        }
                    }
                }
                out[(k * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Ok(out)
}

pub fn dense_acc(input: &[i32], weights: &[i32], out_ch: usize, in_ch: usize, clip7: bool) -> Vec<i32> {
    (0..out_ch)
        .map(|k| {
            (0..in_ch)
                .map(|c| {
                    let x = if clip7 { input[c].clamp(0, 127) } else { input[c] };
                    x * weights[k * in_ch + c]
                })
                .sum()
        })
        .collect()
}

// ── Reference interpreter ────────────────────────────────────────────

fn shape_of<'a>(g: &'a Graph, name: &str) -> Result<&'a [usize], ExecError> {
    g.tensor(name)
        .and_then(|t| t.shape.as_deref())
        .ok_or_else(|| ExecError::Shape(format!("shape of `{name}` unknown; run shape inference first")))
}

/// Evaluate one node given a resolver for its input values.
fn eval_node(
    g: &Graph,
    node: &Node,
    fetch: &mut dyn FnMut(&str) -> Result<Value, ExecError>,
) -> Result<Value, ExecError> {
    let int_input = |fetch: &mut dyn FnMut(&str) -> Result<Value, ExecError>, name: &str| {
        fetch(name)?.as_int().map(<[i32]>::to_vec).ok_or_else(|| {
            ExecError::Dtype(format!("node `{}` wants integer input `{name}`", node.id))
        })
    };
    match node.op {
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            let input = int_input(fetch, &node.inputs[0])?;
            let weights = int_input(fetch, &node.inputs[1])?;
            let in_shape = shape_of(g, &node.inputs[0])?.to_vec();
            let w_shape = shape_of(g, &node.inputs[1])?.to_vec();
            let out = conv2d_acc(
                &input,
                in_shape[0],
                in_shape[1],
                in_shape[2],
                &weights,
                w_shape[0],
                w_shape[2],
                w_shape[3],
                node.attrs.stride.unwrap_or(1),
                node.attrs.padding.unwrap_or(0),
                node.op == OpKind::DepthwiseConv2d,
                false,
            )?;
            Ok(Value::Int(out))
        }
        OpKind::Dense => {
            let input = int_input(fetch, &node.inputs[0])?;
            let weights = int_input(fetch, &node.inputs[1])?;
            let w_shape = shape_of(g, &node.inputs[1])?;
            Ok(Value::Int(dense_acc(&input, &weights, w_shape[0], w_shape[1], false)))
        }
        OpKind::BiasAdd => {
            let input = int_input(fetch, &node.inputs[0])?;
            let bias = int_input(fetch, &node.inputs[1])?;
            let shape = shape_of(g, &node.inputs[0])?;
            let per_ch = shape.iter().skip(1).product::<usize>().max(1);
            Ok(Value::Int(
                input.iter().enumerate().map(|(i, &v)| v + bias[i / per_ch]).collect(),
            ))
        }
        OpKind::RightShift => {
            let n = node.attrs.amount.unwrap_or(0);
            let input = int_input(fetch, &node.inputs[0])?;
            Ok(Value::Int(input.iter().map(|&v| v >> n).collect()))
        }
        OpKind::Clip => {
            let lo = node.attrs.min.unwrap_or(i32::MIN);
            let hi = node.attrs.max.unwrap_or(i32::MAX);
            let input = int_input(fetch, &node.inputs[0])?;
            Ok(Value::Int(input.iter().map(|&v| v.clamp(lo, hi)).collect()))
        }
        OpKind::Cast => {
            let input = int_input(fetch, &node.inputs[0])?;
            let out = match node.attrs.dtype.unwrap_or(DataType::I32) {
                DataType::I8 => input.iter().map(|&v| v as i8 as i32).collect(),
                DataType::I32 => input,
                DataType::Ternary => input.iter().map(|&v| v.clamp(-1, 1)).collect(),
            };
            Ok(Value::Int(out))
        }
        OpKind::Add => {
            let a = int_input(fetch, &node.inputs[0])?;
            let b = int_input(fetch, &node.inputs[1])?;
            if a.len() != b.len() {
                return Err(ExecError::Shape(format!("add `{}` operand length mismatch", node.id)));
            }
            Ok(Value::Int(a.iter().zip(&b).map(|(&x, &y)| x + y).collect()))
        }
        OpKind::AvgPool2d | OpKind::MaxPool2d => {
            let input = int_input(fetch, &node.inputs[0])?;
            let shape = shape_of(g, &node.inputs[0])?;
            let (c, in_h, in_w) = (shape[0], shape[1], shape[2]);
            let w = node.attrs.window.unwrap_or(1);
            let s = node.attrs.stride.unwrap_or(1);
            let out_h = crate::graph::conv_out_dim(in_h, 0, w, s)
                .ok_or_else(|| ExecError::Shape(format!("pool `{}` window too big", node.id)))?;
            let out_w = crate::graph::conv_out_dim(in_w, 0, w, s)
                .ok_or_else(|| ExecError::Shape(format!("pool `{}` window too big", node.id)))?;
            let mut out = vec![0i32; c * out_h * out_w];
            for ch in 0..c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let window: Vec<i32> = (0..w)
                            .flat_map(|fy| {
                                let input = &input;
                                (0..w).map(move |fx| {
                                    input[(ch * in_h + oy * s + fy) * in_w + ox * s + fx]
                                })
                            })
                            .collect();
                        out[(ch * out_h + oy) * out_w + ox] = if node.op == OpKind::MaxPool2d {
                            *window.iter().max().unwrap()
                        } else {
                            // integer mean, floor toward negative infinity
                            window.iter().sum::<i32>().div_euclid((w * w) as i32)
                        };
                    }
                }
            }
            Ok(Value::Int(out))
        }
        OpKind::Softmax => {
            let input = int_input(fetch, &node.inputs[0])?;
            // float64 softmax over de-scaled logits; excluded from
            // bit-exact comparisons
            let scaled: Vec<f64> = input.iter().map(|&v| v as f64 / 128.0).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Ok(Value::Float(exps.iter().map(|&e| e / sum).collect()))
        }
    }
}

fn check_inputs(g: &Graph, inputs: &BTreeMap<String, Vec<i32>>) -> Result<(), ExecError> {
    for name in &g.inputs {
        let t = g.tensor(name).ok_or_else(|| ExecError::MissingInput(name.clone()))?;
        let values = inputs.get(name).ok_or_else(|| ExecError::MissingInput(name.clone()))?;
        let want = t.elem_count().ok_or_else(|| ExecError::Shape(format!("input `{name}` has no shape")))?;
        if values.len() != want {
            return Err(ExecError::Shape(format!(
                "input `{name}` has {} values, shape wants {want}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| !t.dtype.in_range(v)) {
            return Err(ExecError::Dtype(format!("input `{name}` value {bad} out of {} range", t.dtype)));
        }
    }
    Ok(())
}

/// Evaluate the graph in topological order over whole tensors.
pub fn run_graph(g: &Graph, inputs: &BTreeMap<String, Vec<i32>>) -> Result<BTreeMap<String, Value>, ExecError> {
    check_inputs(g, inputs)?;
    let order = crate::graph::topological_order(g)
        .map_err(|e| ExecError::Shape(format!("graph not executable: {e}")))?;

    let mut env: HashMap<String, Value> = inputs
        .iter()
        .map(|(name, values)| (name.clone(), Value::Int(values.clone())))
        .collect();

    for idx in order {
        let node = &g.nodes[idx];
        let mut fetch = |name: &str| -> Result<Value, ExecError> {
            if let Some(v) = env.get(name) {
                return Ok(v.clone());
            }
            g.tensor(name)
                .and_then(|t| t.data.clone())
                .map(Value::Int)
                .ok_or_else(|| ExecError::MissingInput(name.to_string()))
        };
        let value = eval_node(g, node, &mut fetch)?;
        env.insert(node.output.clone(), value);
    }

    let mut outputs = BTreeMap::new();
    for name in &g.outputs {
        let value = env
            .get(name)
            .cloned()
            .or_else(|| g.tensor(name).and_then(|t| t.data.clone()).map(Value::Int))
            .ok_or_else(|| ExecError::MissingInput(name.clone()))?;
        outputs.insert(name.clone(), value);
    }
    Ok(outputs)
}

// ── Simulated memory ─────────────────────────────────────────────────

struct SimL2 {
    bytes: Vec<u8>,
}

impl SimL2 {
    fn check(&self, off: u64, len: u64, what: &str) -> Result<(), ExecError> {
        if off + len > self.bytes.len() as u64 {
            return Err(ExecError::AddressFault(format!(
                "{what}: [{off}, {}) outside simulated L2 of {} bytes",
                off + len,
                self.bytes.len()
            )));
        }
        Ok(())
    }

    fn read(&self, off: u64, len: u64, what: &str) -> Result<&[u8], ExecError> {
        self.check(off, len, what)?;
        Ok(&self.bytes[off as usize..(off + len) as usize])
    }

    fn write(&mut self, off: u64, data: &[u8], what: &str) -> Result<(), ExecError> {
        self.check(off, data.len() as u64, what)?;
        self.bytes[off as usize..off as usize + data.len()].copy_from_slice(data);
        Ok(())
    }
}

fn encode_values(values: &[i32], dtype: DataType) -> Vec<u8> {
    match dtype {
        DataType::I32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        _ => values.iter().map(|&v| v as i8 as u8).collect(),
    }
}

fn decode_values(bytes: &[u8], dtype: DataType) -> Vec<i32> {
    match dtype {
        DataType::I32 => bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => bytes.iter().map(|&b| b as i8 as i32).collect(),
    }
}

/// Fence a DMA transfer against the L2 range that legitimately backs it.
fn fence_runs(dma: &DmaTransfer, lo: u64, hi: u64, l2_side_src: bool, what: &str) -> Result<(), ExecError> {
    if dma.n_transfers != dma.runs.len() {
        return Err(ExecError::BadSchedule(format!("{what}: n_transfers disagrees with run list")));
    }
    for run in &dma.runs {
        let off = if l2_side_src { run.src } else { run.dst };
        if off < lo || off + run.len > hi {
            return Err(ExecError::AddressFault(format!(
                "{what}: run [{off}, {}) escapes [{lo}, {hi})",
                off + run.len
            )));
        }
    }
    Ok(())
}

// ── Schedule interpreter ─────────────────────────────────────────────

/// Execute the compiled schedule literally: DMA runs are byte copies
/// between the simulated L2, fenced L1 buffers and the weight memory;
/// accelerator compute applies the same integer kernels per tile.
pub fn run_schedule(
    s: &Schedule,
    weight_blob: &[u8],
    inputs: &BTreeMap<String, Vec<i32>>,
    want_trace: bool,
) -> Result<ExecResult, ExecError> {
    let g = &s.graph;
    check_inputs(g, inputs)?;
    if weight_blob.len() as u64 != s.manifest.total_bytes {
        return Err(ExecError::BadSchedule(format!(
            "weight blob is {} bytes, manifest wants {}",
            weight_blob.len(),
            s.manifest.total_bytes
        )));
    }

    let mut l2 = SimL2 { bytes: vec![0u8; (s.weights_base + s.manifest.total_bytes) as usize] };
    l2.write(s.weights_base, weight_blob, "weight blob")?;

    for binding in &s.inputs {
        let offset = binding
            .offset
            .ok_or_else(|| ExecError::BadSchedule(format!("input `{}` unplanned", binding.tensor)))?;
        let values = &inputs[&binding.tensor];
        l2.write(offset, &encode_values(values, binding.dtype), "graph input")?;
    }

    let mut floats: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut trace = Vec::new();

    for call in &s.calls {
        match call {
            KernelCall::Cpu { unit, nodes } => {
                run_cpu_unit(s, &mut l2, nodes, &mut floats)?;
                if want_trace {
                    snapshot_unit(s, &l2, *unit, &floats, &mut trace)?;
                }
            }
            KernelCall::Accel(call) => {
                run_accel_call(s, &mut l2, call, weight_blob)?;
                if want_trace {
                    snapshot_unit(s, &l2, call.unit, &floats, &mut trace)?;
                }
            }
        }
    }

    let mut outputs = BTreeMap::new();
    for binding in &s.outputs {
        let value = if binding.float {
            Value::Float(floats.remove(&binding.tensor).ok_or_else(|| {
                ExecError::BadSchedule(format!("float output `{}` never produced", binding.tensor))
            })?)
        } else {
            let offset = binding
                .offset
                .ok_or_else(|| ExecError::BadSchedule(format!("output `{}` unplanned", binding.tensor)))?;
            Value::Int(decode_values(l2.read(offset, binding.size, "graph output")?, binding.dtype))
        };
        outputs.insert(binding.tensor.clone(), value);
    }
    Ok(ExecResult { outputs, trace })
}

fn plan_range(s: &Schedule, tensor: &str) -> Result<(u64, u64), ExecError> {
    s.plan
        .entry(tensor)
        .map(|e| (e.offset, e.offset + e.size))
        .ok_or_else(|| ExecError::AddressFault(format!("tensor `{tensor}` has no planned range")))
}

fn read_planned(s: &Schedule, l2: &SimL2, tensor: &str) -> Result<Value, ExecError> {
    let t = s.graph.tensor(tensor).ok_or_else(|| ExecError::MissingInput(tensor.to_string()))?;
    let (lo, hi) = plan_range(s, tensor)?;
    Ok(Value::Int(decode_values(l2.read(lo, hi - lo, "planned read")?, t.dtype)))
}

fn snapshot_unit(
    s: &Schedule,
    l2: &SimL2,
    unit: usize,
    floats: &BTreeMap<String, Vec<f64>>,
    trace: &mut Vec<UnitSnapshot>,
) -> Result<(), ExecError> {
    // record whatever the unit published: planned tensors or float results
    let published: Vec<String> = match &s.calls[position_of(s, unit)] {
        KernelCall::Accel(call) => vec![call.region.output.clone()],
        KernelCall::Cpu { nodes, .. } => nodes
            .iter()
            .filter_map(|id| s.graph.node(id))
            .map(|n| n.output.clone())
            .filter(|t| s.plan.entry(t).is_some() || floats.contains_key(t))
            .collect(),
    };
    for tensor in published {
        let value = match floats.get(&tensor) {
            Some(f) => Value::Float(f.clone()),
            None => read_planned(s, l2, &tensor)?,
        };
        trace.push(UnitSnapshot { unit, tensor, value });
    }
    Ok(())
}

fn position_of(s: &Schedule, unit: usize) -> usize {
    s.calls
        .iter()
        .position(|c| match c {
            KernelCall::Cpu { unit: u, .. } => *u == unit,
            KernelCall::Accel(a) => a.unit == unit,
        })
        .unwrap_or(0)
}

fn run_cpu_unit(
    s: &Schedule,
    l2: &mut SimL2,
    nodes: &[String],
    floats: &mut BTreeMap<String, Vec<f64>>,
) -> Result<(), ExecError> {
    let g = &s.graph;
    let mut scratch: HashMap<String, Value> = HashMap::new();

    for id in nodes {
        let node = g
            .node(id)
            .ok_or_else(|| ExecError::BadSchedule(format!("cpu unit names unknown node `{id}`")))?;
        let mut fetch = |name: &str| -> Result<Value, ExecError> {
            if let Some(v) = scratch.get(name) {
                return Ok(v.clone());
            }
            if let Some(t) = g.tensor(name) {
                if let Some(data) = &t.data {
                    return Ok(Value::Int(data.clone()));
                }
            }
            read_planned(s, l2, name)
        };
        let value = eval_node(g, node, &mut fetch)?;
        match &value {
            Value::Float(f) => {
                floats.insert(node.output.clone(), f.clone());
            }
            Value::Int(ints) => {
                if let Some(entry) = s.plan.entry(&node.output) {
                    let dtype = g.tensor(&node.output).map(|t| t.dtype).unwrap_or(DataType::I32);
                    l2.write(entry.offset, &encode_values(ints, dtype), "cpu unit output")?;
                }
            }
        }
        scratch.insert(node.output.clone(), value);
    }
    Ok(())
}

/// Bump per-byte write counters for an output DMA; any byte written twice
/// within one call, or never, is a coverage fault.
fn mark_coverage(
    coverage: &mut [u8],
    base: u64,
    dma: &DmaTransfer,
    tensor: &str,
) -> Result<(), ExecError> {
    for run in &dma.runs {
        for b in 0..run.len {
            let idx = (run.dst - base + b) as usize;
            if coverage[idx] != 0 {
                return Err(ExecError::CoverageFault(format!(
                    "output byte {idx} of `{tensor}` written twice"
                )));
            }
            coverage[idx] = 1;
        }
    }
    Ok(())
}

fn run_accel_call(s: &Schedule, l2: &mut SimL2, call: &crate::schedule::AccelCall, blob: &[u8]) -> Result<(), ExecError> {
    let g = &s.graph;
    let region = &call.region;

    if region.pattern == PatternKind::AddRequant {
        return run_accel_add(s, l2, call);
    }

    let geometry = region
        .geometry
        .as_ref()
        .ok_or_else(|| ExecError::BadSchedule(format!("unit {} lacks geometry", call.unit)))?;
    let entry = s
        .manifest_entry(call.image)
        .ok_or_else(|| ExecError::BadSchedule(format!("unit {} names a missing image", call.unit)))?;
    let image_lo = s.weights_base + entry.offset;
    let image_hi = image_lo + entry.len;
    let image_bytes = &blob[entry.offset as usize..(entry.offset + entry.len) as usize];
    let clip7 = call.accel_kind == AcceleratorKind::AnalogImc;
    let (in_lo, in_hi) = plan_range(s, &region.data_inputs[0])?;
    let (out_lo, out_hi) = plan_range(s, &region.output)?;

    let bias: Option<&Vec<i32>> = match &region.bias {
        Some(name) => Some(
            g.tensor(name)
                .and_then(|t| t.data.as_ref())
                .ok_or_else(|| ExecError::MissingInput(name.clone()))?,
        ),
        None => None,
    };
    let rq = region
        .requant
        .ok_or_else(|| ExecError::BadSchedule(format!("unit {} lacks requant params", call.unit)))?;

    if let Some(load) = &call.weight_load {
        fence_runs(load, image_lo, image_hi, true, "analog weight load")?;
        l2.check(image_lo, entry.len, "analog weight image")?;
    }

    // analog image geometry for packed lookups
    let ana_cols = if entry.layout == crate::memplan::WeightLayout::AnaTernaryPacked {
        entry.dims.get(1).copied().unwrap_or(0)
    } else {
        0
    };
    let ana_weight = |r: usize, k: usize| -> i32 {
        let bit = (r * ana_cols + k) * 2;
        match (image_bytes[bit / 8] >> (bit % 8)) & 0b11 {
            0b11 => -1,
            0b01 => 1,
            _ => 0,
        }
    };

    let kernel = geometry.kernel_elems();
    let mut coverage = vec![0u8; (out_hi - out_lo) as usize];
    // dense input-channel loops accumulate i32 partials across iterations
    let mut dense_acc: Vec<i32> = Vec::new();

    for it in &call.iterations {
        let r = &it.rect;

        // input DMA into a fenced, packed L1 window buffer
        let dma = &it.input_dma[0];
        fence_runs(dma, in_lo, in_hi, true, "input dma")?;
        let in_elems = match geometry.kind {
            LayerKind::Dense => r.c_len,
            _ => r.c_len * r.iy_len * r.ix_len,
        };
        let mut l1_in = vec![0u8; in_elems];
        for run in &dma.runs {
            let src = l2.read(run.src, run.len, "input dma")?;
            let dst = run.dst as usize;
            if dst + run.len as usize > l1_in.len() {
                return Err(ExecError::AddressFault(format!(
                    "input dma writes past the L1 window of unit {}",
                    call.unit
                )));
            }
            l1_in[dst..dst + run.len as usize].copy_from_slice(src);
        }

        // weight memory for this tile (digital); analog reads the image
        let mut wmem: Vec<u8> = Vec::new();
        if let Some(wdma) = &it.weight_dma {
            fence_runs(wdma, image_lo, image_hi, true, "weight dma")?;
            wmem = vec![0u8; wdma.bytes as usize];
            for run in &wdma.runs {
                let src = l2.read(run.src, run.len, "weight dma")?;
                wmem[run.dst as usize..(run.dst + run.len) as usize].copy_from_slice(src);
            }
        }
        let dig_weight = |idx: usize| -> i32 { wmem[idx] as i8 as i32 };

        let x_at = |ci: usize, yy: usize, xx: usize| -> i32 {
            let v = l1_in[(ci * r.iy_len + yy) * r.ix_len + xx] as i8 as i32;
            if clip7 {
                v.clamp(0, 127)
            } else {
                v
            }
        };

        match geometry.kind {
            LayerKind::Conv2d | LayerKind::Dwconv2d => {
                let mut l1_out = vec![0u8; r.k_len * r.oy_len * r.ox_len];
                for ki in 0..r.k_len {
                    let k = r.k0 + ki;
                    for oyi in 0..r.oy_len {
                        let oy = r.oy0 + oyi;
                        for oxi in 0..r.ox_len {
                            let ox = r.ox0 + oxi;
                            let mut acc = 0i32;
                            let chans: std::ops::Range<usize> = match geometry.kind {
                                LayerKind::Dwconv2d => ki..ki + 1,
                                _ => 0..r.c_len,
                            };
                            for ci in chans {
                                let c_abs = r.c0 + ci;
                                for fy in 0..geometry.kernel_h {
                                    let gy = (oy * geometry.stride + fy) as isize - geometry.padding as isize;
                                    if gy < 0 || gy >= geometry.in_h as isize {
                                        continue;
                                    }
                                    for fx in 0..geometry.kernel_w {
                                        let gx = (ox * geometry.stride + fx) as isize
                                            - geometry.padding as isize;
                                        if gx < 0 || gx >= geometry.in_w as isize {
                                            continue;
                                        }
                                        let yy = gy as usize - r.iy0;
                                        let xx = gx as usize - r.ix0;
                                        let x = x_at(ci, yy, xx);
                                        let w = match call.accel_kind {
                                            AcceleratorKind::DigitalSimd => {
                                                let idx = match geometry.kind {
                                                    LayerKind::Dwconv2d => {
                                                        ki * kernel + fy * geometry.kernel_w + fx
                                                    }
                                                    _ => (ki * geometry.in_ch + c_abs) * kernel
                                                        + fy * geometry.kernel_w
                                                        + fx,
                                                };
                                                dig_weight(idx)
                                            }
                                            AcceleratorKind::AnalogImc => {
                                                let row = c_abs * kernel + fy * geometry.kernel_w + fx;
                                                ana_weight(row, k)
                                            }
                                        };
                                        acc += x * w;
                                    }
                                }
                            }
                            if let Some(b) = bias {
                                acc += b[k];
                            }
                            let v = apply_requant(acc, &rq);
                            l1_out[(ki * r.oy_len + oyi) * r.ox_len + oxi] = v as i8 as u8;
                        }
                    }
                }
                let out_dma = it
                    .output_dma
                    .as_ref()
                    .ok_or_else(|| ExecError::BadSchedule("conv tile without output dma".into()))?;
                fence_runs(out_dma, out_lo, out_hi, false, "output dma")?;
                mark_coverage(&mut coverage, out_lo, out_dma, &region.output)?;
                for run in &out_dma.runs {
                    let src = run.src as usize;
                    let data = l1_out[src..src + run.len as usize].to_vec();
                    l2.write(run.dst, &data, "output dma")?;
                }
            }
            LayerKind::Dense => {
                if r.c0 == 0 {
                    dense_acc = vec![0i32; r.k_len];
                }
                if dense_acc.len() != r.k_len {
                    return Err(ExecError::BadSchedule("dense accumulator shape drifted".into()));
                }
                for ki in 0..r.k_len {
                    let k = r.k0 + ki;
                    for ci in 0..r.c_len {
                        let x = {
                            let v = l1_in[ci] as i8 as i32;
                            if clip7 {
                                v.clamp(0, 127)
                            } else {
                                v
                            }
                        };
                        let w = match call.accel_kind {
                            AcceleratorKind::DigitalSimd => dig_weight(ki * r.c_len + ci),
                            AcceleratorKind::AnalogImc => ana_weight(r.c0 + ci, k),
                        };
                        dense_acc[ki] += x * w;
                    }
                }
                if let Some(out_dma) = &it.output_dma {
                    fence_runs(out_dma, out_lo, out_hi, false, "output dma")?;
                    mark_coverage(&mut coverage, out_lo, out_dma, &region.output)?;
                    let bytes: Vec<u8> = (0..r.k_len)
                        .map(|ki| {
                            let mut acc = dense_acc[ki];
                            if let Some(b) = bias {
                                acc += b[r.k0 + ki];
                            }
                            apply_requant(acc, &rq) as i8 as u8
                        })
                        .collect();
                    for run in &out_dma.runs {
                        let src = run.src as usize;
                        l2.write(run.dst, &bytes[src..src + run.len as usize], "output dma")?;
                    }
                }
            }
        }
    }

    if coverage.iter().any(|&c| c == 0) {
        return Err(ExecError::CoverageFault(format!(
            "output `{}` has bytes never written by unit {}",
            region.output, call.unit
        )));
    }
    Ok(())
}

fn run_accel_add(s: &Schedule, l2: &mut SimL2, call: &crate::schedule::AccelCall) -> Result<(), ExecError> {
    let region = &call.region;
    let it = call
        .iterations
        .first()
        .ok_or_else(|| ExecError::BadSchedule("add call without iterations".into()))?;

    let mut operands = Vec::new();
    for (i, dma) in it.input_dma.iter().enumerate() {
        let (lo, hi) = plan_range(s, &region.data_inputs[i])?;
        fence_runs(dma, lo, hi, true, "add input dma")?;
        let mut buf = vec![0u8; dma.bytes as usize];
        for run in &dma.runs {
            let src = l2.read(run.src, run.len, "add input dma")?;
            buf[run.dst as usize..(run.dst + run.len) as usize].copy_from_slice(src);
        }
        operands.push(buf);
    }
    let (a, b) = (&operands[0], &operands[1]);
    let sums: Vec<i32> = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as i8 as i32) + (y as i8 as i32))
        .collect();
    let bytes: Vec<u8> = match &region.requant {
        Some(rq) => sums.iter().map(|&v| apply_requant(v, rq) as i8 as u8).collect(),
        None => sums.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };

    let out_dma = it
        .output_dma
        .as_ref()
        .ok_or_else(|| ExecError::BadSchedule("add call without output dma".into()))?;
    let (out_lo, out_hi) = plan_range(s, &region.output)?;
    fence_runs(out_dma, out_lo, out_hi, false, "add output dma")?;
    let mut coverage = vec![0u8; (out_hi - out_lo) as usize];
    mark_coverage(&mut coverage, out_lo, out_dma, &region.output)?;
    for run in &out_dma.runs {
        l2.write(run.dst, &bytes[run.src as usize..(run.src + run.len) as usize], "add output dma")?;
    }
    if coverage.iter().any(|&c| c == 0) {
        return Err(ExecError::CoverageFault(format!("add output `{}` not fully written", region.output)));
    }
    Ok(())
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_graph, infer_shapes};

    #[test]
    fn requant_examples() {
        assert_eq!(requant(1000, 4, -128, 127), 62);
        assert_eq!(requant(-1, 1, -128, 127), -1);
        assert_eq!(requant(300, 0, 0, 127), 127);
    }

    #[test]
    fn conv_scalar_cases() {
        let out = conv2d_acc(&[2], 1, 1, 1, &[3], 1, 1, 1, 1, 0, false, false).unwrap();
        assert_eq!(out, vec![6]);
        let out = conv2d_acc(&[5], 1, 1, 1, &[-1], 1, 1, 1, 1, 0, false, false).unwrap();
        assert_eq!(out, vec![-5]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        // brute-force 6-loop oracle on a random-ish 4x6x6 conv
        let in_ch = 4;
        let (ih, iw) = (6, 6);
        let out_ch = 3;
        let (kh, kw) = (3, 3);
        let (stride, pad) = (1, 1);
        let mut seed = 0x9e3779b9u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            ((seed % 17) as i32) - 8
        };
        let input: Vec<i32> = (0..in_ch * ih * iw).map(|_| next()).collect();
        let weights: Vec<i32> = (0..out_ch * in_ch * kh * kw).map(|_| next()).collect();

        let fast = conv2d_acc(&input, in_ch, ih, iw, &weights, out_ch, kh, kw, stride, pad, false, false).unwrap();

        let (oh, ow) = (6, 6);
        let mut naive = vec![0i32; out_ch * oh * ow];
        for k in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0;
                    for c in 0..in_ch {
                        for fy in 0..kh {
                            for fx in 0..kw {
                                let gy = oy as isize + fy as isize - pad as isize;
                                let gx = ox as isize + fx as isize - pad as isize;
                                if gy < 0 || gx < 0 || gy >= ih as isize || gx >= iw as isize {
                                    continue;
                                }
                                acc += input[(c * ih + gy as usize) * iw + gx as usize]
                                    * weights[(k * in_ch + c) * kh * kw + fy * kw + fx];
                            }
                        }
                    }
                    naive[(k * oh + oy) * ow + ox] = acc;
                }
            }
        }
        assert_eq!(fast, naive);
    }

    #[test]
    fn identity_conv_roundtrips_input() {
        let text = r#"{
  "tensors": [
    {"name": "x", "shape": [1, 2, 2], "dtype": "i8"},
    {"name": "w", "shape": [1, 1, 1, 1], "dtype": "i8", "data": [1]},
    {"name": "t0", "dtype": "i32"},
    {"name": "t1", "dtype": "i32"},
    {"name": "t2", "dtype": "i32"},
    {"name": "y", "dtype": "i8"}
  ],
  "nodes": [
    {"id": "conv", "op": "conv2d", "inputs": ["x", "w"], "output": "t0", "attrs": {"stride": 1, "padding": 0}},
    {"id": "shift", "op": "right_shift", "inputs": ["t0"], "output": "t1", "attrs": {"amount": 0}},
    {"id": "clip", "op": "clip", "inputs": ["t1"], "output": "t2", "attrs": {"min": -128, "max": 127}},
    {"id": "cast", "op": "cast", "inputs": ["t2"], "output": "y", "attrs": {"dtype": "i8"}}
  ],
  "inputs": ["x"],
  "outputs": ["y"]
}"#;
        let g = infer_shapes(&parse_graph(text).unwrap()).unwrap();
        let inputs = BTreeMap::from([("x".to_string(), vec![7, -3, 0, 42])]);
        let out = run_graph(&g, &inputs).unwrap();
        assert_eq!(out["y"], Value::Int(vec![7, -3, 0, 42]));
    }

    #[test]
    fn wrong_input_shape_errors() {
        let text = r#"{
  "tensors": [
    {"name": "x", "shape": [4], "dtype": "i8"},
    {"name": "y", "dtype": "i8"}
  ],
  "nodes": [
    {"id": "c", "op": "clip", "inputs": ["x"], "output": "y", "attrs": {"min": 0, "max": 10}}
  ],
  "inputs": ["x"],
  "outputs": ["y"]
}"#;
        let g = infer_shapes(&parse_graph(text).unwrap()).unwrap();
        let inputs = BTreeMap::from([("x".to_string(), vec![1, 2])]);
        assert!(matches!(run_graph(&g, &inputs), Err(ExecError::Shape(_))));
    }

    #[test]
    fn avg_pool_floors_toward_negative_infinity() {
        let text = r#"{
  "tensors": [
    {"name": "x", "shape": [1, 2, 2], "dtype": "i8"},
    {"name": "y", "dtype": "i8"}
  ],
  "nodes": [
    {"id": "p", "op": "avg_pool2d", "inputs": ["x"], "output": "y", "attrs": {"window": 2, "stride": 2}}
  ],
  "inputs": ["x"],
  "outputs": ["y"]
}"#;
        let g = infer_shapes(&parse_graph(text).unwrap()).unwrap();
        let out = run_graph(&g, &BTreeMap::from([("x".to_string(), vec![-1, -1, -1, -2])])).unwrap();
        // (-5).div_euclid(4) = -2
        assert_eq!(out["y"], Value::Int(vec![-2]));
    }

    #[test]
    fn softmax_returns_normalized_floats() {
        let text = r#"{
  "tensors": [
    {"name": "x", "shape": [3], "dtype": "i8"},
    {"name": "y", "dtype": "i8"}
  ],
  "nodes": [
    {"id": "sm", "op": "softmax", "inputs": ["x"], "output": "y"}
  ],
  "inputs": ["x"],
  "outputs": ["y"]
}"#;
        let g = infer_shapes(&parse_graph(text).unwrap()).unwrap();
        let out = run_graph(&g, &BTreeMap::from([("x".to_string(), vec![0, 64, 127])])).unwrap();
        match &out["y"] {
            Value::Float(p) => {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p[2] > p[1] && p[1] > p[0]);
            }
            other => panic!("{other:?}"),
        }
    }
}
