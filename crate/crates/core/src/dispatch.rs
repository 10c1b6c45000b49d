//! Accelerator dispatch: finds offloadable operator chains in the graph
//! and assigns each one to an accelerator (or leaves it on the CPU) under
//! a deployment policy.
//!
//! The matcher runs a greedy longest-match scan in topological order over
//! chains of the form
//!
//! `anchor -> bias_add? -> right_shift -> clip -> cast(i8) -> clip?`
//!
//! with anchors conv2d / depthwise_conv2d / dense / add. The trailing clip
//! is a fused ReLU. Element-wise add also matches bare, without the
//! requantization tail. Accelerator selection routes by weight precision:
//! 8-bit regions go to the digital array, ternary to the analog one, with
//! capability rules checked per region.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DataType, Graph, OpKind};
use crate::platform::{supports, AcceleratorKind, PatternKind, PlatformSpec, RegionFacts};
use crate::tile::{LayerGeometry, LayerKind};

// ── Types ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    CpuOnly,
    Digital,
    Analog,
    Mixed,
}

impl DispatchPolicy {
    pub const ALL: [DispatchPolicy; 4] =
        [DispatchPolicy::CpuOnly, DispatchPolicy::Digital, DispatchPolicy::Analog, DispatchPolicy::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            DispatchPolicy::CpuOnly => "cpu_only",
            DispatchPolicy::Digital => "digital",
            DispatchPolicy::Analog => "analog",
            DispatchPolicy::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<DispatchPolicy> {
        DispatchPolicy::ALL.iter().copied().find(|p| p.as_str() == s)
    }
}

/// Requantization parameters fused into a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub shift: u32,
    pub clip_min: i32,
    pub clip_max: i32,
    /// Fused trailing activation: clamp to [relu_min, relu_max] after cast.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub relu: Option<(i32, i32)>,
}

/// One matched operator chain, executable as a single accelerator call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedRegion {
    pub pattern: PatternKind,
    /// Node ids of the chain, in dataflow order.
    pub nodes: Vec<String>,
    pub anchor: String,
    /// Activation inputs of the anchor (two for add).
    pub data_inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub bias: Option<String>,
    /// Tensor the chain ultimately produces.
    pub output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub weight_dtype: Option<DataType>,
    /// None for bare add regions.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub requant: Option<RequantParams>,
    /// Anchor geometry; None for element-wise add.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub geometry: Option<LayerGeometry>,
}

impl MatchedRegion {
    pub fn fused_activation(&self) -> bool {
        self.requant.map_or(false, |r| r.relu.is_some())
    }

    pub fn facts(&self) -> RegionFacts {
        let (kernel, stride) = match &self.geometry {
            Some(g) if g.kind != LayerKind::Dense => (Some((g.kernel_h, g.kernel_w)), Some(g.stride)),
            _ => (None, None),
        };
        RegionFacts { pattern: self.pattern, weight_dtype: self.weight_dtype, kernel, stride }
    }
}

/// One schedulable unit: a region bound to an accelerator, or a run of
/// nodes lowered to a fused CPU kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Unit {
    Accel { target: String, region: MatchedRegion },
    Cpu { nodes: Vec<String> },
}

impl Unit {
    pub fn node_ids(&self) -> Vec<&str> {
        match self {
            Unit::Accel { region, .. } => region.nodes.iter().map(|s| s.as_str()).collect(),
            Unit::Cpu { nodes } => nodes.iter().map(|s| s.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedGraph {
    pub units: Vec<Unit>,
    pub policy: DispatchPolicy,
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("PolicyUnsatisfiable: {0}")]
    PolicyUnsatisfiable(String),
}

// ── Pattern matching ─────────────────────────────────────────────────

/// Greedy longest-match over the graph in topological order. Each node is
/// claimed by at most one region; chains only absorb intermediates that
/// have exactly one consumer and are not graph outputs.
pub fn match_patterns(g: &Graph) -> Vec<MatchedRegion> {
    let order = match crate::graph::topological_order(g) {
        Ok(o) => o,
        Err(_) => return Vec::new(),
    };
    let mut claimed: HashSet<&str> = HashSet::new();
    let mut regions = Vec::new();

    for &idx in &order {
        let node = &g.nodes[idx];
        if claimed.contains(node.id.as_str()) {
            continue;
        }
        let pattern = match node.op {
            OpKind::Conv2d => PatternKind::Conv2dRequant,
            OpKind::DepthwiseConv2d => PatternKind::Dwconv2dRequant,
            OpKind::Dense => PatternKind::DenseRequant,
            OpKind::Add => PatternKind::AddRequant,
            _ => continue,
        };
        if let Some(region) = try_match(g, idx, pattern, &claimed) {
            claimed.extend(region.nodes.iter().map(|s| {
                // set owns the strings; claim by interned graph id
                g.node(s).map(|n| n.id.as_str()).unwrap_or_default()
            }));
            regions.push(region);
        }
    }
    regions
}

/// The single consumer of `tensor`, provided it is not a graph output and
/// nothing else reads it.
fn sole_consumer<'a>(g: &'a Graph, tensor: &str) -> Option<&'a crate::graph::Node> {
    if g.is_graph_output(tensor) {
        return None;
    }
    let consumers = g.consumers(tensor);
    match consumers.as_slice() {
        [one] => Some(one),
        _ => None,
    }
}

fn try_match(g: &Graph, anchor_idx: usize, pattern: PatternKind, claimed: &HashSet<&str>) -> Option<MatchedRegion> {
    let anchor = &g.nodes[anchor_idx];
    let mut nodes = vec![anchor.id.clone()];
    let mut cursor = anchor;

    // optional bias_add directly after a weighted anchor
    let mut bias = None;
    if pattern != PatternKind::AddRequant {
        if let Some(next) = sole_consumer(g, &cursor.output) {
            if next.op == OpKind::BiasAdd && !claimed.contains(next.id.as_str()) && next.inputs[0] == cursor.output {
                bias = Some(next.inputs[1].clone());
                nodes.push(next.id.clone());
                cursor = next;
            }
        }
    }

    // mandatory requant tail: right_shift -> clip -> cast(i8)
    let tail = (|| {
        let shift = sole_consumer(g, &cursor.output).filter(|n| n.op == OpKind::RightShift)?;
        let clip = sole_consumer(g, &shift.output).filter(|n| n.op == OpKind::Clip)?;
        let cast = sole_consumer(g, &clip.output)
            .filter(|n| n.op == OpKind::Cast && n.attrs.dtype == Some(DataType::I8))?;
        if [shift, clip, cast].iter().any(|n| claimed.contains(n.id.as_str())) {
            return None;
        }
        let mut tail_nodes = vec![shift.id.clone(), clip.id.clone(), cast.id.clone()];
        let mut params = RequantParams {
            shift: shift.attrs.amount.unwrap_or(0),
            clip_min: clip.attrs.min.unwrap_or(-128),
            clip_max: clip.attrs.max.unwrap_or(127),
            relu: None,
        };
        let mut output = cast.output.clone();
        // absorb the optional trailing activation clip
        if let Some(act) = sole_consumer(g, &cast.output).filter(|n| n.op == OpKind::Clip) {
            if !claimed.contains(act.id.as_str()) {
                params.relu = Some((act.attrs.min.unwrap_or(0), act.attrs.max.unwrap_or(127)));
                output = act.output.clone();
                tail_nodes.push(act.id.clone());
            }
        }
        Some((tail_nodes, params, output))
    })();

    let (requant, output) = match tail {
        Some((tail_nodes, params, output)) => {
            nodes.extend(tail_nodes);
            (Some(params), output)
        }
        None => {
            if pattern != PatternKind::AddRequant || bias.is_some() {
                // weighted anchors only match with a full requant tail
                return None;
            }
            (None, anchor.output.clone())
        }
    };

    let (data_inputs, weights, weight_dtype, geometry) = match pattern {
        PatternKind::AddRequant => (anchor.inputs.clone(), None, None, None),
        _ => {
            let weights = anchor.inputs[1].clone();
            let wt = g.tensor(&weights)?;
            let geometry = region_geometry(g, anchor, wt.dtype)?;
            (vec![anchor.inputs[0].clone()], Some(weights), Some(wt.dtype), Some(geometry))
        }
    };

    Some(MatchedRegion {
        pattern,
        nodes,
        anchor: anchor.id.clone(),
        data_inputs,
        weights,
        bias,
        output,
        weight_dtype,
        requant,
        geometry,
    })
}

fn region_geometry(g: &Graph, anchor: &crate::graph::Node, weight_dtype: DataType) -> Option<LayerGeometry> {
    let bits = weight_dtype.weight_bits();
    let in_shape = g.tensor(&anchor.inputs[0])?.shape.as_ref()?;
    let w_shape = g.tensor(&anchor.inputs[1])?.shape.as_ref()?;
    match anchor.op {
        OpKind::Conv2d => LayerGeometry::conv2d(
            in_shape[0],
            w_shape[0],
            in_shape[1],
            in_shape[2],
            w_shape[2],
            anchor.attrs.stride.unwrap_or(1),
            anchor.attrs.padding.unwrap_or(0),
            bits,
        ),
        OpKind::DepthwiseConv2d => LayerGeometry::dwconv2d(
            in_shape[0],
            in_shape[1],
            in_shape[2],
            w_shape[2],
            anchor.attrs.stride.unwrap_or(1),
            anchor.attrs.padding.unwrap_or(0),
            bits,
        ),
        OpKind::Dense => Some(LayerGeometry::dense(w_shape[1], w_shape[0], bits)),
        _ => None,
    }
}

// ── Assignment ───────────────────────────────────────────────────────

fn accel_by_kind(p: &PlatformSpec, kind: AcceleratorKind) -> Option<&crate::platform::AcceleratorSpec> {
    p.accelerators.iter().find(|a| a.kind == kind)
}

/// Would an element-wise add region fit the io pool without tiling?
/// Two operands plus the result must be resident at once; adds are not
/// tiled, so an oversized add stays on the CPU.
fn add_fits_l1(g: &Graph, region: &MatchedRegion, p: &PlatformSpec, accel: &crate::platform::AcceleratorSpec) -> bool {
    let Some(budget) = p.pool(&accel.io_pool).map(|pool| pool.capacity) else { return false };
    let elems: usize = region
        .data_inputs
        .first()
        .and_then(|t| g.tensor(t))
        .and_then(|t| t.elem_count())
        .unwrap_or(usize::MAX);
    let out_bytes = if region.requant.is_some() { elems } else { elems.saturating_mul(4) };
    (2usize.saturating_mul(elems).saturating_add(out_bytes)) as u64 <= budget
}

/// Assign matched regions to accelerators under the policy. Weight
/// precision routes first: 8-bit regions to the digital array, ternary to
/// the analog one. Unassigned nodes fall back to fused CPU kernels,
/// grouped into maximal runs between accelerator calls.
pub fn assign_accelerators(
    regions: &[MatchedRegion],
    g: &Graph,
    p: &PlatformSpec,
    policy: DispatchPolicy,
) -> Result<PartitionedGraph, DispatchError> {
    let digital = accel_by_kind(p, AcceleratorKind::DigitalSimd);
    let analog = accel_by_kind(p, AcceleratorKind::AnalogImc);

    match policy {
        DispatchPolicy::Digital if digital.is_none() => {
            return Err(DispatchError::PolicyUnsatisfiable("platform has no digital accelerator".into()))
        }
        DispatchPolicy::Analog if analog.is_none() => {
            return Err(DispatchError::PolicyUnsatisfiable(
                "platform has no ternary-capable analog accelerator".into(),
            ))
        }
        DispatchPolicy::Mixed if digital.is_none() && analog.is_none() => {
            return Err(DispatchError::PolicyUnsatisfiable("platform has no accelerators".into()))
        }
        _ => {}
    }

    // target per region, in region order
    let mut targets: Vec<Option<String>> = Vec::with_capacity(regions.len());
    for region in regions {
        let facts = region.facts();
        let target = match policy {
            DispatchPolicy::CpuOnly => None,
            DispatchPolicy::Digital => digital
                .filter(|a| supports(a, &facts))
                .filter(|a| region.pattern != PatternKind::AddRequant || add_fits_l1(g, region, p, a))
                .map(|a| a.name.clone()),
            DispatchPolicy::Analog => analog
                .filter(|a| supports(a, &facts))
                .filter(|_| region.pattern != PatternKind::AddRequant)
                .map(|a| a.name.clone()),
            DispatchPolicy::Mixed => {
                // precision decides when both accelerators could serve
                let preferred = match region.weight_dtype {
                    Some(DataType::Ternary) => analog,
                    Some(_) => digital,
                    None => digital,
                };
                preferred
                    .filter(|a| supports(a, &facts))
                    .filter(|a| {
                        region.pattern != PatternKind::AddRequant || add_fits_l1(g, region, p, a)
                    })
                    .map(|a| a.name.clone())
            }
        };
        targets.push(target);
    }

    // contract regions to their anchor position in topological order
    let order = crate::graph::topological_order(g).map_err(|e| {
        DispatchError::PolicyUnsatisfiable(format!("graph is not schedulable: {e}"))
    })?;
    let mut region_of: HashMap<&str, usize> = HashMap::new();
    for (r, region) in regions.iter().enumerate() {
        for id in &region.nodes {
            region_of.insert(id.as_str(), r);
        }
    }

    // Units are emitted at the anchor's topological position; chains are
    // linear with single-consumer intermediates, so contracting them there
    // preserves a valid order. Unassigned regions still run as one fused
    // CPU kernel; other leftover nodes become single-node CPU kernels.
    let mut units = Vec::new();
    let mut emitted_regions: HashSet<usize> = HashSet::new();

    for &idx in &order {
        let node = &g.nodes[idx];
        match region_of.get(node.id.as_str()) {
            Some(&r) => {
                if emitted_regions.insert(r) {
                    match &targets[r] {
                        Some(target) => units.push(Unit::Accel {
                            target: target.clone(),
                            region: regions[r].clone(),
                        }),
                        None => units.push(Unit::Cpu { nodes: regions[r].nodes.clone() }),
                    }
                }
            }
            None => units.push(Unit::Cpu { nodes: vec![node.id.clone()] }),
        }
    }

    let pg = PartitionedGraph { units, policy };
    debug_assert!(partition_covers(&pg, g));
    Ok(pg)
}

/// Every graph node appears in exactly one unit.
pub fn partition_covers(pg: &PartitionedGraph, g: &Graph) -> bool {
    let mut seen: HashSet<&str> = HashSet::new();
    for unit in &pg.units {
        for id in unit.node_ids() {
            if !seen.insert(id) {
                return false;
            }
        }
    }
    seen.len() == g.nodes.len() && g.nodes.iter().all(|n| seen.contains(n.id.as_str()))
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_graph, infer_shapes, Attrs, Node, TensorSpec};
    use crate::platform::builtin_diana;

    /// conv -> bias_add -> right_shift -> clip -> cast -> clip chain.
    fn chain_graph(with_bias: bool, with_relu: bool) -> Graph {
        let mut tensors = vec![
            TensorSpec { name: "x".into(), shape: Some(vec![4, 8, 8]), dtype: DataType::I8, data: None },
            TensorSpec {
                name: "w".into(),
                shape: Some(vec![8, 4, 3, 3]),
                dtype: DataType::I8,
                data: Some(vec![1; 8 * 4 * 9]),
            },
            TensorSpec { name: "t0".into(), shape: None, dtype: DataType::I32, data: None },
            TensorSpec { name: "t2".into(), shape: None, dtype: DataType::I32, data: None },
            TensorSpec { name: "t3".into(), shape: None, dtype: DataType::I32, data: None },
            TensorSpec { name: "t4".into(), shape: None, dtype: DataType::I8, data: None },
        ];
        let mut nodes = vec![Node {
            id: "conv".into(),
            op: OpKind::Conv2d,
            inputs: vec!["x".into(), "w".into()],
            output: "t0".into(),
            attrs: Attrs { stride: Some(1), padding: Some(1), ..Attrs::default() },
        }];
        let mut shift_in = "t0".to_string();
        if with_bias {
            tensors.push(TensorSpec {
                name: "b".into(),
                shape: Some(vec![8]),
                dtype: DataType::I32,
                data: Some(vec![0; 8]),
            });
            tensors.push(TensorSpec { name: "t1".into(), shape: None, dtype: DataType::I32, data: None });
            nodes.push(Node {
                id: "bias".into(),
                op: OpKind::BiasAdd,
                inputs: vec!["t0".into(), "b".into()],
                output: "t1".into(),
                attrs: Attrs::default(),
            });
            shift_in = "t1".into();
        }
        nodes.push(Node {
            id: "shift".into(),
            op: OpKind::RightShift,
            inputs: vec![shift_in],
            output: "t2".into(),
            attrs: Attrs { amount: Some(4), ..Attrs::default() },
        });
        nodes.push(Node {
            id: "clip".into(),
            op: OpKind::Clip,
            inputs: vec!["t2".into()],
            output: "t3".into(),
            attrs: Attrs { min: Some(-128), max: Some(127), ..Attrs::default() },
        });
        nodes.push(Node {
            id: "cast".into(),
            op: OpKind::Cast,
            inputs: vec!["t3".into()],
            output: "t4".into(),
            attrs: Attrs { dtype: Some(DataType::I8), ..Attrs::default() },
        });
        let mut outputs = vec!["t4".to_string()];
        if with_relu {
            tensors.push(TensorSpec { name: "t5".into(), shape: None, dtype: DataType::I8, data: None });
            nodes.push(Node {
                id: "relu".into(),
                op: OpKind::Clip,
                inputs: vec!["t4".into()],
                output: "t5".into(),
                attrs: Attrs { min: Some(0), max: Some(127), ..Attrs::default() },
            });
            outputs = vec!["t5".into()];
        }
        let g = Graph { tensors, nodes, inputs: vec!["x".into()], outputs };
        infer_shapes(&g).unwrap()
    }

    #[test]
    fn matches_full_chain_with_fused_relu() {
        let g = chain_graph(true, true);
        let regions = match_patterns(&g);
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(r.nodes.len(), 6);
        assert!(r.fused_activation());
        assert_eq!(r.pattern, PatternKind::Conv2dRequant);
        assert_eq!(r.bias.as_deref(), Some("b"));
        assert_eq!(r.output, "t5");
    }

    #[test]
    fn matches_without_bias() {
        let g = chain_graph(false, false);
        let regions = match_patterns(&g);
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(r.nodes.len(), 4);
        assert!(r.bias.is_none());
        assert!(!r.fused_activation());
    }

    #[test]
    fn lone_softmax_stays_on_cpu() {
        let text = r#"{
  "tensors": [
    {"name": "x", "shape": [10], "dtype": "i8"},
    {"name": "y", "dtype": "i8"}
  ],
  "nodes": [
    {"id": "sm", "op": "softmax", "inputs": ["x"], "output": "y"}
  ],
  "inputs": ["x"],
  "outputs": ["y"]
}"#;
        let g = infer_shapes(&parse_graph(text).unwrap()).unwrap();
        assert!(match_patterns(&g).is_empty());
        let pg = assign_accelerators(&[], &g, &builtin_diana(), DispatchPolicy::Mixed).unwrap();
        assert_eq!(pg.units.len(), 1);
        assert!(matches!(pg.units[0], Unit::Cpu { .. }));
    }

    #[test]
    fn chain_with_external_reader_does_not_fuse() {
        let mut g = chain_graph(false, false);
        // expose the i32 accumulator as a second graph output
        g.outputs.push("t0".into());
        let regions = match_patterns(&g);
        assert!(regions.is_empty());
    }

    #[test]
    fn digital_policy_takes_i8_region() {
        let g = chain_graph(true, true);
        let regions = match_patterns(&g);
        let pg = assign_accelerators(&regions, &g, &builtin_diana(), DispatchPolicy::Digital).unwrap();
        assert_eq!(pg.units.len(), 1);
        match &pg.units[0] {
            Unit::Accel { target, .. } => assert_eq!(target, "digital"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cpu_only_has_zero_accel_units() {
        let g = chain_graph(true, true);
        let regions = match_patterns(&g);
        let pg = assign_accelerators(&regions, &g, &builtin_diana(), DispatchPolicy::CpuOnly).unwrap();
        assert!(pg.units.iter().all(|u| matches!(u, Unit::Cpu { .. })));
        assert!(partition_covers(&pg, &g));
    }

    #[test]
    fn ternary_region_flips_to_analog_in_mixed() {
        let mut g = chain_graph(true, true);
        {
            let w = g.tensor_mut("w").unwrap();
            w.dtype = DataType::Ternary;
            w.data = Some(vec![1; 8 * 4 * 9]);
        }
        let regions = match_patterns(&g);
        assert_eq!(regions[0].weight_dtype, Some(DataType::Ternary));
        let pg = assign_accelerators(&regions, &g, &builtin_diana(), DispatchPolicy::Mixed).unwrap();
        match &pg.units[0] {
            Unit::Accel { target, .. } => assert_eq!(target, "analog"),
            other => panic!("{other:?}"),
        }
        // and in digital mode the same region falls back to the CPU
        let pg = assign_accelerators(&regions, &g, &builtin_diana(), DispatchPolicy::Digital).unwrap();
        assert!(pg.units.iter().all(|u| matches!(u, Unit::Cpu { .. })));
    }

    #[test]
    fn dispatch_is_deterministic() {
        let g = chain_graph(true, true);
        let regions = match_patterns(&g);
        let a = assign_accelerators(&regions, &g, &builtin_diana(), DispatchPolicy::Mixed).unwrap();
        for _ in 0..5 {
            let b = assign_accelerators(&regions, &g, &builtin_diana(), DispatchPolicy::Mixed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn analog_mode_rejects_missing_analog() {
        let mut p = builtin_diana();
        p.accelerators.retain(|a| a.kind != AcceleratorKind::AnalogImc);
        let g = chain_graph(true, true);
        let err = assign_accelerators(&match_patterns(&g), &g, &p, DispatchPolicy::Analog);
        assert!(matches!(err, Err(DispatchError::PolicyUnsatisfiable(_))));
    }
}
