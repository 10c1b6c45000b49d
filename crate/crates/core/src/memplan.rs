//! Main-memory planning: liveness analysis over the unit schedule, greedy
//! L2 offset assignment for boundary activations, and packed, padded
//! weight images per accelerator.
//!
//! Tensors internal to a fused kernel never touch L2; only unit-boundary
//! activations, graph inputs and integer graph outputs are planned.
//! Softmax results are float-valued and returned host-side, so they get
//! no L2 range either.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{MatchedRegion, PartitionedGraph, Unit};
use crate::graph::{DataType, Graph, OpKind};
use crate::platform::{AcceleratorSpec, MemoryPool};
use crate::tile::{analog_padded_cols, LayerKind};

// ── Liveness ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivenessInterval {
    pub tensor: String,
    /// Unit index that defines the tensor (graph inputs: 0).
    pub def: usize,
    /// Last unit index that reads it (graph outputs: end of schedule).
    pub last_use: usize,
    pub size: u64,
}

/// Tensors a unit reads from L2: inputs of its nodes that are neither
/// produced inside the unit nor constants.
fn unit_l2_reads<'a>(g: &'a Graph, unit: &Unit) -> Vec<&'a str> {
    let internal: Vec<&str> = unit
        .node_ids()
        .iter()
        .filter_map(|id| g.node(id))
        .map(|n| n.output.as_str())
        .collect();
    let mut reads = Vec::new();
    for id in unit.node_ids() {
        let Some(node) = g.node(id) else { continue };
        for input in &node.inputs {
            let Some(t) = g.tensor(input) else { continue };
            if t.is_constant() || internal.contains(&input.as_str()) {
                continue;
            }
            if !reads.contains(&t.name.as_str()) {
                reads.push(t.name.as_str());
            }
        }
    }
    reads
}

/// The tensor a unit publishes to L2, if any. Softmax outputs are float
/// host-side values and publish nothing.
fn unit_l2_writes<'a>(g: &'a Graph, unit: &'a Unit) -> Vec<&'a str> {
    match unit {
        Unit::Accel { region, .. } => vec![region.output.as_str()],
        Unit::Cpu { nodes } => {
            let internal: Vec<&str> =
                nodes.iter().filter_map(|id| g.node(id)).map(|n| n.output.as_str()).collect();
            nodes
                .iter()
                .filter_map(|id| g.node(id))
                .filter(|n| n.op != OpKind::Softmax)
                .map(|n| n.output.as_str())
                .filter(|out| {
                    let external_reader = g
                        .consumers(out)
                        .iter()
                        .any(|c| !nodes.iter().any(|id| id == &c.id));
                    let _ = &internal;
                    external_reader || g.is_graph_output(out)
                })
                .collect()
        }
    }
}

pub fn tensor_bytes(g: &Graph, name: &str) -> Option<u64> {
    let t = g.tensor(name)?;
    Some((t.elem_count()? * t.dtype.activation_bytes()) as u64)
}

/// Liveness intervals over the unit schedule. Graph inputs live from
/// position 0; graph outputs live to the end.
pub fn liveness(pg: &PartitionedGraph, g: &Graph) -> Vec<LivenessInterval> {
    let end = pg.units.len().saturating_sub(1);
    let mut def: BTreeMap<&str, usize> = BTreeMap::new();
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();

    for name in &g.inputs {
        def.insert(name, 0);
        last.insert(name, 0);
    }
    for (pos, unit) in pg.units.iter().enumerate() {
        for w in unit_l2_writes(g, unit) {
            def.entry(w).or_insert(pos);
            last.entry(w).or_insert(pos);
        }
        for r in unit_l2_reads(g, unit) {
            if def.contains_key(r) {
                let e = last.entry(r).or_insert(pos);
                *e = (*e).max(pos);
            }
        }
    }
    for out in &g.outputs {
        if let Some(e) = last.get_mut(out.as_str()) {
            *e = end;
        }
    }

    def.iter()
        .filter_map(|(&name, &d)| {
            let size = tensor_bytes(g, name)?;
            Some(LivenessInterval { tensor: name.to_string(), def: d, last_use: last[name], size })
        })
        .collect()
}

// ── L2 planning ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub tensor: String,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub pool: String,
    pub capacity: u64,
    pub entries: Vec<PlanEntry>,
    /// Max over schedule positions of the summed live tensor sizes.
    pub peak: u64,
    /// Highest allocated address.
    pub extent: u64,
}

impl MemoryPlan {
    pub fn entry(&self, tensor: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.tensor == tensor)
    }
}

#[derive(Debug, Error)]
pub enum MemplanError {
    #[error("OutOfMemory: {needed} bytes needed, pool `{pool}` holds {capacity}")]
    OutOfMemory { needed: u64, capacity: u64, pool: String },
    #[error("DtypeMismatch: `{tensor}` is {got}, accelerator wants {expected}")]
    DtypeMismatch { tensor: String, got: DataType, expected: DataType },
    #[error("missing constant payload for `{0}`")]
    MissingData(String),
}

fn overlap(a: &LivenessInterval, b: &LivenessInterval) -> bool {
    a.def <= b.last_use && b.def <= a.last_use
}

/// Max over schedule positions of the summed live sizes.
fn sum_live_peak(intervals: &[LivenessInterval]) -> u64 {
    let end = intervals.iter().map(|iv| iv.last_use).max().unwrap_or(0);
    (0..=end)
        .map(|pos| {
            intervals
                .iter()
                .filter(|iv| iv.def <= pos && pos <= iv.last_use)
                .map(|iv| iv.size)
                .sum()
        })
        .max()
        .unwrap_or(0)
}

/// Greedy address assignment: process intervals by (def, size desc, name)
/// and place each at the lowest offset whose range is free for the whole
/// interval. Insensitive to the input list order.
pub fn plan_l2(intervals: &[LivenessInterval], pool: &MemoryPool) -> Result<MemoryPlan, MemplanError> {
    let mut work: Vec<&LivenessInterval> = intervals.iter().collect();
    work.sort_by(|a, b| {
        a.def
            .cmp(&b.def)
            .then(b.size.cmp(&a.size))
            .then(a.tensor.cmp(&b.tensor))
    });

    let mut placed: Vec<(&LivenessInterval, u64)> = Vec::new();
    for iv in work {
        // gaps between live neighbours, lowest address first
        let mut neighbours: Vec<(u64, u64)> = placed
            .iter()
            .filter(|(other, _)| overlap(other, iv))
            .map(|(other, off)| (*off, *off + other.size))
            .collect();
        neighbours.sort_unstable();
        let mut offset = 0u64;
        for (lo, hi) in neighbours {
            if offset + iv.size <= lo {
                break;
            }
            offset = offset.max(hi);
        }
        if offset + iv.size > pool.capacity {
            let needed = sum_live_peak(intervals).max(offset + iv.size);
            return Err(MemplanError::OutOfMemory { needed, capacity: pool.capacity, pool: pool.name.clone() });
        }
        placed.push((iv, offset));
    }

    let extent = placed.iter().map(|(iv, off)| off + iv.size).max().unwrap_or(0);
    let entries = placed
        .iter()
        .map(|(iv, off)| PlanEntry { tensor: iv.tensor.clone(), offset: *off, size: iv.size })
        .collect();
    Ok(MemoryPlan {
        pool: pool.name.clone(),
        capacity: pool.capacity,
        entries,
        peak: sum_live_peak(intervals),
        extent,
    })
}

// ── Ternary packing ──────────────────────────────────────────────────

/// 2-bit ternary codes, four values per byte, little-endian within the
/// byte: -1 -> 0b11, 0 -> 0b00, +1 -> 0b01.
pub fn pack_ternary(values: &[i32]) -> Vec<u8> {
    let mut out = vec![0u8; (values.len() + 3) / 4];
    for (i, &v) in values.iter().enumerate() {
        let code: u8 = match v {
            -1 => 0b11,
            0 => 0b00,
            1 => 0b01,
            other => panic!("non-ternary value {other} reached the packer"),
        };
        out[i / 4] |= code << (2 * (i % 4));
    }
    out
}

pub fn unpack_ternary(bytes: &[u8], count: usize) -> Vec<i32> {
    (0..count)
        .map(|i| match (bytes[i / 4] >> (2 * (i % 4))) & 0b11 {
            0b11 => -1,
            0b01 => 1,
            _ => 0,
        })
        .collect()
}

// ── Weight images ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLayout {
    /// i8 weights in K-major C-y-x order, one byte per value.
    DigCyxI8,
    /// Ternary weights as a row-major (input rows x padded output columns)
    /// cell-array image, 2-bit packed.
    AnaTernaryPacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightImage {
    /// Unit index this image belongs to.
    pub unit: usize,
    /// Anchor node id, for reports.
    pub layer: String,
    pub layout: WeightLayout,
    /// Padded dims: weight tensor shape for digital, [rows, cols] for analog.
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

/// Lay out a region's constant weights for its accelerator. Digital images
/// are the K-major i8 bytes as stored; analog images arrange values as
/// (row = input channel x kernel position, column = output channel), pad
/// columns to the array write granularity with zeros, and 2-bit pack.
pub fn layout_weights(
    unit: usize,
    region: &MatchedRegion,
    g: &Graph,
    accel: &AcceleratorSpec,
) -> Result<WeightImage, MemplanError> {
    let name = region.weights.clone().ok_or_else(|| MemplanError::MissingData(region.anchor.clone()))?;
    let dtype = region.weight_dtype.unwrap_or(DataType::I32);
    if dtype != accel.weight_dtype {
        return Err(MemplanError::DtypeMismatch { tensor: name, got: dtype, expected: accel.weight_dtype });
    }
    let tensor = g.tensor(&name).ok_or_else(|| MemplanError::MissingData(name.clone()))?;
    let data = tensor.data.as_ref().ok_or_else(|| MemplanError::MissingData(name.clone()))?;
    let geometry = region.geometry.as_ref().ok_or_else(|| MemplanError::MissingData(name.clone()))?;

    match accel.weight_dtype {
        DataType::I8 => Ok(WeightImage {
            unit,
            layer: region.anchor.clone(),
            layout: WeightLayout::DigCyxI8,
            dims: tensor.shape.clone().unwrap_or_default(),
            payload: data.iter().map(|&v| v as i8 as u8).collect(),
        }),
        DataType::Ternary => {
            let geom =
                if geometry.kind == LayerKind::Dense { geometry.as_unit_conv() } else { *geometry };
            let rows = geom.in_ch * geom.kernel_elems();
            let cols =
                analog_padded_cols(geom.out_ch, accel.array_cols, accel.column_group.unwrap_or(64));
            let mut cells = vec![0i32; rows * cols];
            for k in 0..geom.out_ch {
                for r in 0..rows {
                    cells[r * cols + k] = data[k * rows + r];
                }
            }
            Ok(WeightImage {
                unit,
                layer: region.anchor.clone(),
                layout: WeightLayout::AnaTernaryPacked,
                dims: vec![rows, cols],
                payload: pack_ternary(&cells),
            })
        }
        DataType::I32 => Err(MemplanError::DtypeMismatch {
            tensor: name,
            got: DataType::I32,
            expected: accel.weight_dtype,
        }),
    }
}

// ── Storage report ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LayerStorage {
    pub layer: String,
    pub target: String,
    pub image_bytes: u64,
    /// What the same weights would take densely at one byte per value.
    pub dense_i8_bytes: u64,
    /// Analog padding inflated the image beyond the dense i8 size.
    pub padding_exceeds_dense: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StorageReport {
    pub layers: Vec<LayerStorage>,
    pub total_by_target: BTreeMap<String, u64>,
}

pub fn weight_storage_report(pg: &PartitionedGraph, g: &Graph, images: &[WeightImage]) -> StorageReport {
    let by_unit: HashMap<usize, &WeightImage> = images.iter().map(|im| (im.unit, im)).collect();
    let mut report = StorageReport::default();
    for (pos, unit) in pg.units.iter().enumerate() {
        let Unit::Accel { target, region } = unit else { continue };
        let Some(image) = by_unit.get(&pos) else { continue };
        let elems = region
            .weights
            .as_deref()
            .and_then(|w| g.tensor(w))
            .and_then(|t| t.elem_count())
            .unwrap_or(0) as u64;
        let image_bytes = image.payload.len() as u64;
        report.layers.push(LayerStorage {
            layer: region.anchor.clone(),
            target: target.clone(),
            image_bytes,
            dense_i8_bytes: elems,
            padding_exceeds_dense: image.layout == WeightLayout::AnaTernaryPacked && image_bytes > elems,
        });
        *report.total_by_target.entry(target.clone()).or_insert(0) += image_bytes;
    }
    report
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(tensor: &str, def: usize, last_use: usize, size: u64) -> LivenessInterval {
        LivenessInterval { tensor: tensor.into(), def, last_use, size }
    }

    fn pool(capacity: u64) -> MemoryPool {
        MemoryPool { name: "l2".into(), capacity }
    }

    #[test]
    fn disjoint_intervals_share_offset() {
        let plan = plan_l2(&[iv("a", 0, 1, 100), iv("b", 2, 3, 100)], &pool(4096)).unwrap();
        assert_eq!(plan.entry("a").unwrap().offset, 0);
        assert_eq!(plan.entry("b").unwrap().offset, 0);
        assert_eq!(plan.peak, 100);
    }

    #[test]
    fn overlapping_intervals_stack() {
        let plan = plan_l2(&[iv("a", 0, 2, 100), iv("b", 1, 3, 100)], &pool(4096)).unwrap();
        let offsets: Vec<u64> = ["a", "b"].iter().map(|t| plan.entry(t).unwrap().offset).collect();
        assert_eq!(offsets, vec![0, 100]);
        assert_eq!(plan.peak, 200);
    }

    #[test]
    fn gap_reuse_picks_lowest_address() {
        // Processing order is size-descending per def position: b, a, c.
        // After a dies, d (def 2) reuses a's [200, 280) range instead of
        // growing the heap.
        let intervals =
            [iv("a", 0, 1, 100), iv("b", 0, 3, 200), iv("c", 0, 2, 50), iv("d", 2, 3, 80)];
        let plan = plan_l2(&intervals, &pool(4096)).unwrap();
        assert_eq!(plan.entry("b").unwrap().offset, 0);
        assert_eq!(plan.entry("a").unwrap().offset, 200);
        assert_eq!(plan.entry("c").unwrap().offset, 300);
        assert_eq!(plan.entry("d").unwrap().offset, 200);
        assert_eq!(plan.extent, 350);
    }

    #[test]
    fn out_of_memory_reports_peak_over_capacity() {
        let err = plan_l2(&[iv("a", 0, 1, 3000), iv("b", 0, 1, 2000)], &pool(4096)).unwrap_err();
        match err {
            MemplanError::OutOfMemory { needed, capacity, .. } => {
                assert!(needed > capacity);
                assert_eq!(needed, 5000);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plan_is_order_insensitive() {
        let a = [iv("a", 0, 2, 128), iv("b", 1, 3, 64), iv("c", 2, 4, 256)];
        let mut b = a.clone();
        b.reverse();
        let pa = plan_l2(&a, &pool(4096)).unwrap();
        let pb = plan_l2(&b, &pool(4096)).unwrap();
        for t in ["a", "b", "c"] {
            assert_eq!(pa.entry(t).unwrap().offset, pb.entry(t).unwrap().offset);
        }
    }

    #[test]
    fn no_live_overlap_shares_addresses() {
        // brute-force the invariant on a small synthetic set
        let intervals = [
            iv("a", 0, 2, 100),
            iv("b", 1, 4, 50),
            iv("c", 3, 5, 100),
            iv("d", 0, 5, 30),
            iv("e", 2, 3, 60),
        ];
        let plan = plan_l2(&intervals, &pool(4096)).unwrap();
        for x in &intervals {
            for y in &intervals {
                if x.tensor == y.tensor || !overlap(x, y) {
                    continue;
                }
                let ex = plan.entry(&x.tensor).unwrap();
                let ey = plan.entry(&y.tensor).unwrap();
                let disjoint = ex.offset + ex.size <= ey.offset || ey.offset + ey.size <= ex.offset;
                assert!(disjoint, "{} and {} overlap in memory", x.tensor, y.tensor);
            }
        }
        // peak matches a brute-force sweep
        assert_eq!(plan.peak, sum_live_peak(&intervals));
    }

    #[test]
    fn ternary_pack_example() {
        assert_eq!(pack_ternary(&[-1, 0, 1, 1]), vec![0x53]);
    }

    #[test]
    fn ternary_roundtrip() {
        let values: Vec<i32> = (0..37).map(|i| [(-1i32), 0, 1][i % 3]).collect();
        let packed = pack_ternary(&values);
        assert_eq!(unpack_ternary(&packed, values.len()), values);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pack_unpack_identity(values in proptest::collection::vec(-1i32..=1, 0..256)) {
                let packed = pack_ternary(&values);
                prop_assert_eq!(unpack_ternary(&packed, values.len()), values);
            }

            #[test]
            fn planner_never_overlaps_live_ranges(
                raw in proptest::collection::vec((0usize..6, 0usize..6, 1u64..512), 1..12)
            ) {
                let intervals: Vec<LivenessInterval> = raw
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b, size))| LivenessInterval {
                        tensor: format!("t{i}"),
                        def: a.min(b),
                        last_use: a.max(b),
                        size,
                    })
                    .collect();
                if let Ok(plan) = plan_l2(&intervals, &MemoryPool { name: "l2".into(), capacity: 1 << 20 }) {
                    for x in &intervals {
                        for y in &intervals {
                            if x.tensor == y.tensor || !overlap(x, y) { continue; }
                            let ex = plan.entry(&x.tensor).unwrap();
                            let ey = plan.entry(&y.tensor).unwrap();
                            prop_assert!(
                                ex.offset + ex.size <= ey.offset || ey.offset + ey.size <= ex.offset
                            );
                        }
                    }
                    prop_assert_eq!(plan.peak, sum_live_peak(&intervals));
                    prop_assert!(plan.extent <= 1 << 20);
                }
            }
        }
    }
}
