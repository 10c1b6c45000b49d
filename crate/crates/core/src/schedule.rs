//! Lowering to an executable schedule: per-unit tile loops, explicit DMA
//! transfer lists with contiguous-run granularity, and a C-like driver
//! rendering for human inspection.
//!
//! DMA transfers are described run-by-run so both the cost model (setup
//! cost per 1-D run) and the schedule interpreter (byte copies) consume
//! the same ground truth. With C-y-x activations, a tile spanning the full
//! input width needs one run per channel; a tile spanning the full height
//! as well collapses into a single run; partial-width tiles pay one run
//! per row per channel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{DispatchPolicy, MatchedRegion, PartitionedGraph, Unit};
use crate::graph::{DataType, Graph, OpKind};
use crate::memplan::{MemoryPlan, WeightImage, WeightLayout};
use crate::platform::{AcceleratorKind, PatternKind, PlatformSpec};
use crate::tile::{LayerKind, TileSolution};

// ── DMA descriptions ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmaDirection {
    L2ToL1,
    L1ToL2,
    L2ToWmem,
}

/// One contiguous 1-D copy. Offsets are bytes into the source/destination
/// address spaces (absolute for L2, buffer-relative for L1/WMEM).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaRun {
    pub src: u64,
    pub dst: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaTransfer {
    pub direction: DmaDirection,
    /// Count of contiguous 1-D runs; equals `runs.len()`.
    pub n_transfers: usize,
    /// Total bytes; equals the summed run lengths.
    pub bytes: u64,
    /// Symbolic source, e.g. `l2:t_conv1`.
    pub src: String,
    /// Symbolic destination, e.g. `l1:in0`.
    pub dst: String,
    pub runs: Vec<DmaRun>,
}

impl DmaTransfer {
    fn new(direction: DmaDirection, src: String, dst: String, runs: Vec<DmaRun>) -> DmaTransfer {
        DmaTransfer {
            direction,
            n_transfers: runs.len(),
            bytes: runs.iter().map(|r| r.len).sum(),
            src,
            dst,
            runs,
        }
    }
}

// ── Tile iterations ──────────────────────────────────────────────────

/// Output-space ranges of one tile instance plus the derived, clamped
/// input window it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub k0: usize,
    pub k_len: usize,
    pub c0: usize,
    pub c_len: usize,
    pub oy0: usize,
    pub oy_len: usize,
    pub ox0: usize,
    pub ox_len: usize,
    pub iy0: usize,
    pub iy_len: usize,
    pub ix0: usize,
    pub ix_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileIteration {
    pub rect: TileRect,
    pub input_dma: Vec<DmaTransfer>,
    /// Digital accelerators refill the weight memory per tile.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub weight_dma: Option<DmaTransfer>,
    /// Absent on dense input-channel steps that only accumulate partials.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub output_dma: Option<DmaTransfer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelCall {
    pub unit: usize,
    pub target: String,
    pub accel_kind: AcceleratorKind,
    pub region: MatchedRegion,
    /// None for untiled element-wise calls.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub tile: Option<TileSolution>,
    /// Index into the weight manifest; usize::MAX for weightless calls.
    pub image: usize,
    /// Analog accelerators load the whole padded image once per layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub weight_load: Option<DmaTransfer>,
    pub iterations: Vec<TileIteration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelCall {
    Cpu { unit: usize, nodes: Vec<String> },
    Accel(AccelCall),
}

// ── Schedule ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub unit: usize,
    pub layer: String,
    pub layout: WeightLayout,
    pub dims: Vec<usize>,
    /// Offset into the weight blob.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub entries: Vec<ManifestEntry>,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoBinding {
    pub tensor: String,
    pub dtype: DataType,
    pub shape: Vec<usize>,
    /// L2 placement; float-valued outputs (softmax) live host-side only.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub offset: Option<u64>,
    pub size: u64,
    pub float: bool,
}

/// The compiled artifact: a self-contained, deterministic description of
/// every kernel call, tile loop and DMA transfer, executable by the
/// schedule interpreter and measurable by the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub policy: DispatchPolicy,
    pub graph: Graph,
    pub plan: MemoryPlan,
    /// L2 offset where the weight blob starts (right after activations).
    pub weights_base: u64,
    pub manifest: WeightManifest,
    pub calls: Vec<KernelCall>,
    pub inputs: Vec<IoBinding>,
    pub outputs: Vec<IoBinding>,
}

impl Schedule {
    pub fn manifest_entry(&self, image: usize) -> Option<&ManifestEntry> {
        self.manifest.entries.get(image)
    }
}

pub fn serialize_schedule(s: &Schedule) -> String {
    let mut text = serde_json::to_string_pretty(s).expect("schedule serialization cannot fail");
    text.push('\n');
    text
}

pub fn parse_schedule(text: &str) -> Result<Schedule, CodegenError> {
    serde_json::from_str(text).map_err(|e| CodegenError::BadSchedule(e.to_string()))
}

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("PlanMismatch: tensor `{0}` missing from the memory plan")]
    PlanMismatch(String),
    #[error("unit {0} has no tile solution")]
    MissingTile(usize),
    #[error("unit {unit}: missing weight image")]
    MissingImage { unit: usize },
    #[error("malformed schedule: {0}")]
    BadSchedule(String),
}

// ── Lowering ─────────────────────────────────────────────────────────

struct Spans {
    /// (start, len) per dimension step.
    steps: Vec<(usize, usize)>,
}

fn spans(total: usize, tile: usize) -> Spans {
    let mut steps = Vec::new();
    let mut at = 0;
    while at < total {
        let len = tile.min(total - at);
        steps.push((at, len));
        at += len;
    }
    Spans { steps }
}

/// Input rows/cols (clamped to the tensor) that an output span needs.
fn input_window(o0: usize, o_len: usize, stride: usize, kernel: usize, pad: usize, full: usize) -> (usize, usize) {
    let lo = (o0 * stride).saturating_sub(pad);
    let hi = ((o0 + o_len - 1) * stride + kernel).saturating_sub(pad).min(full);
    (lo, hi.saturating_sub(lo))
}

/// Runs covering `[c0, c0+c_len) x [y0, y0+y_len) x [x0, x0+x_len)` of a
/// C-y-x tensor, merged where memory is contiguous. `dir_in` selects
/// L2->L1 or L1->L2.
#[allow(clippy::too_many_arguments)]
fn cyx_window_runs(
    l2_base: u64,
    elem_bytes: u64,
    shape_y: usize,
    shape_x: usize,
    c0: usize,
    c_len: usize,
    y0: usize,
    y_len: usize,
    x0: usize,
    x_len: usize,
    to_l1: bool,
) -> Vec<DmaRun> {
    let mut runs = Vec::new();
    let row = |c: usize, y: usize| ((c * shape_y + y) * shape_x + x0) as u64 * elem_bytes;
    if x_len == shape_x && y_len == shape_y {
        // whole channels, adjacent in memory: one merged run
        let l2 = l2_base + row(c0, 0);
        let len = (c_len * shape_y * shape_x) as u64 * elem_bytes;
        runs.push(if to_l1 { DmaRun { src: l2, dst: 0, len } } else { DmaRun { src: 0, dst: l2, len } });
    } else if x_len == shape_x {
        // full rows: one run per channel
        let len = (y_len * shape_x) as u64 * elem_bytes;
        for ci in 0..c_len {
            let l2 = l2_base + row(c0 + ci, y0);
            let l1 = (ci * y_len * x_len) as u64 * elem_bytes;
            runs.push(if to_l1 { DmaRun { src: l2, dst: l1, len } } else { DmaRun { src: l1, dst: l2, len } });
        }
    } else {
        // one run per row per channel
        let len = x_len as u64 * elem_bytes;
        for ci in 0..c_len {
            for yi in 0..y_len {
                let l2 = l2_base + row(c0 + ci, y0 + yi);
                let l1 = ((ci * y_len + yi) * x_len) as u64 * elem_bytes;
                runs.push(if to_l1 { DmaRun { src: l2, dst: l1, len } } else { DmaRun { src: l1, dst: l2, len } });
            }
        }
    }
    runs
}

fn plan_base(plan: &MemoryPlan, tensor: &str) -> Result<u64, CodegenError> {
    plan.entry(tensor).map(|e| e.offset).ok_or_else(|| CodegenError::PlanMismatch(tensor.to_string()))
}

/// Lower one accelerator unit into its tile loop. Loop order is output
/// channels, then rows, then columns (input channels innermost for dense),
/// so weights are reloaded least often.
#[allow(clippy::too_many_arguments)]
fn lower_accel_unit(
    unit: usize,
    target: &str,
    accel_kind: AcceleratorKind,
    region: &MatchedRegion,
    tile: Option<&TileSolution>,
    plan: &MemoryPlan,
    g: &Graph,
    image: Option<(usize, &ManifestEntry)>,
    weights_base: u64,
) -> Result<AccelCall, CodegenError> {
    let out_base = plan_base(plan, &region.output)?;

    if region.pattern == PatternKind::AddRequant {
        return lower_add_unit(unit, target, accel_kind, region, plan, g, out_base);
    }

    let geometry = region.geometry.as_ref().ok_or(CodegenError::MissingTile(unit))?;
    let tile = tile.ok_or(CodegenError::MissingTile(unit))?;
    let (image_idx, entry) = image.ok_or(CodegenError::MissingImage { unit })?;
    let in_base = plan_base(plan, &region.data_inputs[0])?;
    let image_l2 = weights_base + entry.offset;

    let weight_load = match accel_kind {
        AcceleratorKind::AnalogImc => Some(DmaTransfer::new(
            DmaDirection::L2ToWmem,
            format!("l2:{}", region.weights.as_deref().unwrap_or("?")),
            "wmem".into(),
            vec![DmaRun { src: image_l2, dst: 0, len: entry.len }],
        )),
        AcceleratorKind::DigitalSimd => None,
    };

    let mut iterations = Vec::new();
    let g_layer = geometry;
    let kernel_elems = g_layer.kernel_elems();

    match g_layer.kind {
        LayerKind::Conv2d | LayerKind::Dwconv2d => {
            for &(k0, k_len) in &spans(g_layer.out_ch, tile.dims.out_ch).steps {
                // depthwise channels are tied to the output-channel tile
                let (c0, c_len) = match g_layer.kind {
                    LayerKind::Dwconv2d => (k0, k_len),
                    _ => (0, g_layer.in_ch),
                };
                let weight_dma = match accel_kind {
                    AcceleratorKind::DigitalSimd => {
                        let (src, len) = match g_layer.kind {
                            LayerKind::Dwconv2d => (k0 * kernel_elems, k_len * kernel_elems),
                            _ => (k0 * g_layer.in_ch * kernel_elems, k_len * g_layer.in_ch * kernel_elems),
                        };
                        Some(DmaTransfer::new(
                            DmaDirection::L2ToWmem,
                            format!("l2:{}", region.weights.as_deref().unwrap_or("?")),
                            "wmem".into(),
                            vec![DmaRun { src: image_l2 + src as u64, dst: 0, len: len as u64 }],
                        ))
                    }
                    AcceleratorKind::AnalogImc => None,
                };
                for &(oy0, oy_len) in &spans(g_layer.out_h, tile.dims.out_h).steps {
                    let (iy0, iy_len) =
                        input_window(oy0, oy_len, g_layer.stride, g_layer.kernel_h, g_layer.padding, g_layer.in_h);
                    for &(ox0, ox_len) in &spans(g_layer.out_w, tile.dims.out_w).steps {
                        let (ix0, ix_len) = input_window(
                            ox0,
                            ox_len,
                            g_layer.stride,
                            g_layer.kernel_w,
                            g_layer.padding,
                            g_layer.in_w,
                        );
                        let input_dma = DmaTransfer::new(
                            DmaDirection::L2ToL1,
                            format!("l2:{}", region.data_inputs[0]),
                            "l1:in".into(),
                            cyx_window_runs(
                                in_base, 1, g_layer.in_h, g_layer.in_w, c0, c_len, iy0, iy_len, ix0, ix_len,
                                true,
                            ),
                        );
                        let output_dma = DmaTransfer::new(
                            DmaDirection::L1ToL2,
                            "l1:out".into(),
                            format!("l2:{}", region.output),
                            cyx_window_runs(
                                out_base, 1, g_layer.out_h, g_layer.out_w, k0, k_len, oy0, oy_len, ox0, ox_len,
                                false,
                            ),
                        );
                        iterations.push(TileIteration {
                            rect: TileRect {
                                k0,
                                k_len,
                                c0,
                                c_len,
                                oy0,
                                oy_len,
                                ox0,
                                ox_len,
                                iy0,
                                iy_len,
                                ix0,
                                ix_len,
                            },
                            input_dma: vec![input_dma],
                            weight_dma: weight_dma.clone(),
                            output_dma: Some(output_dma),
                        });
                    }
                }
            }
        }
        LayerKind::Dense => {
            let c_steps = spans(g_layer.in_ch, tile.dims.in_ch).steps;
            for &(k0, k_len) in &spans(g_layer.out_ch, tile.dims.out_ch).steps {
                for (ci, &(c0, c_len)) in c_steps.iter().enumerate() {
                    let last = ci + 1 == c_steps.len();
                    let weight_dma = match accel_kind {
                        AcceleratorKind::DigitalSimd => {
                            let runs = if c_len == g_layer.in_ch {
                                vec![DmaRun {
                                    src: image_l2 + (k0 * g_layer.in_ch) as u64,
                                    dst: 0,
                                    len: (k_len * g_layer.in_ch) as u64,
                                }]
                            } else {
                                (0..k_len)
                                    .map(|ki| DmaRun {
                                        src: image_l2 + ((k0 + ki) * g_layer.in_ch + c0) as u64,
                                        dst: (ki * c_len) as u64,
                                        len: c_len as u64,
                                    })
                                    .collect()
                            };
                            Some(DmaTransfer::new(
                                DmaDirection::L2ToWmem,
                                format!("l2:{}", region.weights.as_deref().unwrap_or("?")),
                                "wmem".into(),
                                runs,
                            ))
                        }
                        AcceleratorKind::AnalogImc => None,
                    };
                    let input_dma = DmaTransfer::new(
                        DmaDirection::L2ToL1,
                        format!("l2:{}", region.data_inputs[0]),
                        "l1:in".into(),
                        vec![DmaRun { src: in_base + c0 as u64, dst: 0, len: c_len as u64 }],
                    );
                    let output_dma = last.then(|| {
                        DmaTransfer::new(
                            DmaDirection::L1ToL2,
                            "l1:out".into(),
                            format!("l2:{}", region.output),
                            vec![DmaRun { src: 0, dst: out_base + k0 as u64, len: k_len as u64 }],
                        )
                    });
                    iterations.push(TileIteration {
                        rect: TileRect {
                            k0,
                            k_len,
                            c0,
                            c_len,
                            oy0: 0,
                            oy_len: 1,
                            ox0: 0,
                            ox_len: 1,
                            iy0: 0,
                            iy_len: 1,
                            ix0: 0,
                            ix_len: 1,
                        },
                        input_dma: vec![input_dma],
                        weight_dma,
                        output_dma,
                    });
                }
            }
        }
    }

    let _ = g;
    Ok(AccelCall {
        unit,
        target: target.to_string(),
        accel_kind,
        region: region.clone(),
        tile: Some(tile.clone()),
        image: image_idx,
        weight_load,
        iterations,
    })
}

/// Element-wise add: one untiled call, whole-tensor copies for both
/// operands and the result.
fn lower_add_unit(
    unit: usize,
    target: &str,
    accel_kind: AcceleratorKind,
    region: &MatchedRegion,
    plan: &MemoryPlan,
    g: &Graph,
    out_base: u64,
) -> Result<AccelCall, CodegenError> {
    let shape = g
        .tensor(&region.data_inputs[0])
        .and_then(|t| t.shape.clone())
        .ok_or_else(|| CodegenError::PlanMismatch(region.data_inputs[0].clone()))?;
    let elems: usize = shape.iter().product();
    let out_bytes = if region.requant.is_some() { 1 } else { 4 };

    let mut input_dma = Vec::new();
    for (i, name) in region.data_inputs.iter().enumerate() {
        let base = plan_base(plan, name)?;
        input_dma.push(DmaTransfer::new(
            DmaDirection::L2ToL1,
            format!("l2:{name}"),
            format!("l1:in{i}"),
            vec![DmaRun { src: base, dst: 0, len: elems as u64 }],
        ));
    }
    let output_dma = DmaTransfer::new(
        DmaDirection::L1ToL2,
        "l1:out".into(),
        format!("l2:{}", region.output),
        vec![DmaRun { src: 0, dst: out_base, len: (elems * out_bytes) as u64 }],
    );
    let (c, y, x) = match shape.as_slice() {
        [c, y, x] => (*c, *y, *x),
        [c] => (*c, 1, 1),
        other => (other.iter().product(), 1, 1),
    };
    Ok(AccelCall {
        unit,
        target: target.to_string(),
        accel_kind,
        region: region.clone(),
        tile: None,
        image: usize::MAX,
        weight_load: None,
        iterations: vec![TileIteration {
            rect: TileRect {
                k0: 0,
                k_len: c,
                c0: 0,
                c_len: c,
                oy0: 0,
                oy_len: y,
                ox0: 0,
                ox_len: x,
                iy0: 0,
                iy_len: y,
                ix0: 0,
                ix_len: x,
            },
            input_dma,
            weight_dma: None,
            output_dma: Some(output_dma),
        }],
    })
}

/// Assemble the full schedule. Deterministic: identical inputs produce
/// byte-identical JSON.
pub fn emit_schedule(
    g: &Graph,
    pg: &PartitionedGraph,
    tiles: &BTreeMap<usize, TileSolution>,
    plan: &MemoryPlan,
    images: &[WeightImage],
    platform: &PlatformSpec,
) -> Result<Schedule, CodegenError> {
    let weights_base = plan.extent;
    let mut manifest = WeightManifest::default();
    let mut image_of_unit: BTreeMap<usize, usize> = BTreeMap::new();
    for im in images {
        image_of_unit.insert(im.unit, manifest.entries.len());
        manifest.entries.push(ManifestEntry {
            unit: im.unit,
            layer: im.layer.clone(),
            layout: im.layout,
            dims: im.dims.clone(),
            offset: manifest.total_bytes,
            len: im.payload.len() as u64,
        });
        manifest.total_bytes += im.payload.len() as u64;
    }

    let mut calls = Vec::new();
    for (idx, unit) in pg.units.iter().enumerate() {
        match unit {
            Unit::Cpu { nodes } => calls.push(KernelCall::Cpu { unit: idx, nodes: nodes.clone() }),
            Unit::Accel { target, region } => {
                let accel = platform
                    .accelerator(target)
                    .ok_or_else(|| CodegenError::BadSchedule(format!("unknown accelerator `{target}`")))?;
                let image = image_of_unit.get(&idx).map(|&i| (i, &manifest.entries[i]));
                let call = lower_accel_unit(
                    idx,
                    target,
                    accel.kind,
                    region,
                    tiles.get(&idx),
                    plan,
                    g,
                    image,
                    weights_base,
                )?;
                calls.push(KernelCall::Accel(call));
            }
        }
    }

    let binding = |name: &String| -> Result<IoBinding, CodegenError> {
        let t = g.tensor(name).ok_or_else(|| CodegenError::PlanMismatch(name.clone()))?;
        let shape = t.shape.clone().unwrap_or_default();
        let float = g.producer(name).map_or(false, |n| n.op == OpKind::Softmax);
        let entry = plan.entry(name);
        if !float && entry.is_none() {
            return Err(CodegenError::PlanMismatch(name.clone()));
        }
        Ok(IoBinding {
            tensor: name.clone(),
            dtype: t.dtype,
            shape,
            offset: entry.map(|e| e.offset),
            size: entry.map(|e| e.size).unwrap_or(0),
            float,
        })
    };

    Ok(Schedule {
        policy: pg.policy,
        graph: g.clone(),
        plan: plan.clone(),
        weights_base,
        manifest,
        calls,
        inputs: g.inputs.iter().map(binding).collect::<Result<_, _>>()?,
        outputs: g.outputs.iter().map(binding).collect::<Result<_, _>>()?,
    })
}

// ── Driver text ──────────────────────────────────────────────────────

/// Human-readable C-like rendering of the schedule: one dma_in/accel_run/
/// dma_out group per tile iteration with literal offsets from the memory
/// plan. Debug output, not promised to compile.
pub fn emit_c_driver(s: &Schedule) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "// tile/DMA driver, {} kernel calls, policy {}", s.calls.len(), s.policy.as_str());
    let _ = writeln!(out, "// L2 activations: {} B, weights at +{}: {} B", s.plan.extent, s.weights_base, s.manifest.total_bytes);
    let _ = writeln!(out, "void network_run(int8_t *l2) {{");
    for call in &s.calls {
        match call {
            KernelCall::Cpu { unit, nodes } => {
                let _ = writeln!(out, "  // unit {unit}: cpu kernel {{{}}}", nodes.join(", "));
                let _ = writeln!(out, "  cpu_kernel_{unit}(l2);");
            }
            KernelCall::Accel(call) => {
                let tiles = call.iterations.len();
                let _ = writeln!(
                    out,
                    "  // unit {}: {} -> {} ({} tile iteration{})",
                    call.unit,
                    call.region.anchor,
                    call.target,
                    tiles,
                    if tiles == 1 { "" } else { "s" }
                );
                if let Some(load) = &call.weight_load {
                    let _ = writeln!(
                        out,
                        "  dma_wload(wmem, l2 + {}, runs={}, bytes={}); // whole layer image",
                        load.runs[0].src, load.n_transfers, load.bytes
                    );
                }
                for it in &call.iterations {
                    for dma in &it.input_dma {
                        let _ = writeln!(
                            out,
                            "  dma_in(l1, {} + {}, runs={}, bytes={});",
                            dma.src,
                            dma.runs.first().map(|r| r.src).unwrap_or(0),
                            dma.n_transfers,
                            dma.bytes
                        );
                    }
                    if let Some(dma) = &it.weight_dma {
                        let _ = writeln!(
                            out,
                            "  dma_wload(wmem, l2 + {}, runs={}, bytes={});",
                            dma.runs.first().map(|r| r.src).unwrap_or(0),
                            dma.n_transfers,
                            dma.bytes
                        );
                    }
                    let r = &it.rect;
                    let _ = writeln!(
                        out,
                        "  accel_run({}, {}, k={}..{}, oy={}..{}, ox={}..{}, c={}..{});",
                        call.target,
                        call.region.anchor,
                        r.k0,
                        r.k0 + r.k_len,
                        r.oy0,
                        r.oy0 + r.oy_len,
                        r.ox0,
                        r.ox0 + r.ox_len,
                        r.c0,
                        r.c0 + r.c_len
                    );
                    if let Some(dma) = &it.output_dma {
                        let _ = writeln!(
                            out,
                            "  dma_out({} + {}, l1, runs={}, bytes={});",
                            dma.dst,
                            dma.runs.first().map(|r| r.dst).unwrap_or(0),
                            dma.n_transfers,
                            dma.bytes
                        );
                    }
                }
            }
        }
    }
    let _ = writeln!(out, "}}");
    out
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_exactly() {
        let s = spans(10, 4);
        assert_eq!(s.steps, vec![(0, 4), (4, 4), (8, 2)]);
        let total: usize = s.steps.iter().map(|&(_, l)| l).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn window_runs_merge_whole_tensor() {
        // full x and y: adjacent channels merge to a single run
        let runs = cyx_window_runs(100, 1, 8, 16, 0, 4, 0, 8, 0, 16, true);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0], DmaRun { src: 100, dst: 0, len: 512 });
    }

    #[test]
    fn window_runs_full_width() {
        // 4 channels, 8 of 16 rows, full width of 16 -> 4 runs of 128 B
        let runs = cyx_window_runs(0, 1, 16, 16, 0, 4, 4, 8, 0, 16, true);
        assert_eq!(runs.len(), 4);
        assert!(runs.iter().all(|r| r.len == 128));
        let bytes: u64 = runs.iter().map(|r| r.len).sum();
        assert_eq!(bytes, 512);
    }

    #[test]
    fn window_runs_partial_width() {
        // partial width: one run per row per channel
        let runs = cyx_window_runs(0, 1, 16, 16, 0, 4, 4, 8, 2, 8, true);
        assert_eq!(runs.len(), 32);
        assert!(runs.iter().all(|r| r.len == 8));
    }

    #[test]
    fn input_window_clamps_padding() {
        // output rows 0..8, stride 1, kernel 3, pad 1, input height 16
        assert_eq!(input_window(0, 8, 1, 3, 1, 16), (0, 9));
        // interior tile gets the full halo
        assert_eq!(input_window(4, 8, 1, 3, 1, 16), (3, 10));
        // bottom tile clamps to the tensor edge
        assert_eq!(input_window(8, 8, 1, 3, 1, 16), (7, 9));
    }
}
