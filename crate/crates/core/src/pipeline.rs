//! End-to-end compilation: parse, validate, infer, match, assign, tile,
//! plan memory, lay out weights, emit the schedule. Also hosts the
//! tiling-vs-budget benchmark sweep.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dispatch::{
    assign_accelerators, match_patterns, DispatchError, DispatchPolicy, PartitionedGraph, Unit,
};
use crate::graph::{infer_shapes, parse_graph, validate, Diagnostic, Graph, GraphError};
use crate::memplan::{
    layout_weights, liveness, plan_l2, weight_storage_report, LivenessInterval, MemoryPlan,
    MemplanError, StorageReport, WeightImage,
};
use crate::perf::{simulate, PerfError};
use crate::platform::{PlatformSpec, L2_POOL};
use crate::schedule::{emit_schedule, CodegenError, Schedule};
use crate::tile::{solve_tiling, TileError, TileSolution, TilingProblem};

#[derive(Debug, Clone, Copy)]
pub struct CompileOptions {
    pub policy: DispatchPolicy,
    /// Disable the accelerator-aware heuristic terms of the tiling
    /// objective (memory-utilization only).
    pub heuristics: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { policy: DispatchPolicy::Mixed, heuristics: true }
    }
}

#[derive(Debug)]
pub struct Artifacts {
    pub graph: Graph,
    pub partition: PartitionedGraph,
    pub tiles: BTreeMap<usize, TileSolution>,
    pub intervals: Vec<LivenessInterval>,
    pub plan: MemoryPlan,
    pub images: Vec<WeightImage>,
    pub schedule: Schedule,
    pub storage: StorageReport,
}

impl Artifacts {
    /// Weight images concatenated in manifest order.
    pub fn weight_blob(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        for image in &self.images {
            blob.extend_from_slice(&image.payload);
        }
        blob
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph validation failed:\n{}", format_diags(.0))]
    Validation(Vec<Diagnostic>),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("unit {unit}: {source}")]
    Tile { unit: usize, source: TileError },
    #[error(transparent)]
    Memplan(#[from] MemplanError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error("platform lacks the `{0}` pool")]
    MissingPool(String),
}

fn format_diags(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl CompileError {
    /// Stable process exit codes: 2 schema/validation, 3 infeasible tile,
    /// 4 out of memory, 5 everything internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            CompileError::Graph(_) | CompileError::Validation(_) | CompileError::MissingPool(_) => 2,
            CompileError::Dispatch(_) => 2,
            CompileError::Tile { .. } => 3,
            CompileError::Memplan(MemplanError::OutOfMemory { .. }) => 4,
            CompileError::Memplan(_) => 2,
            CompileError::Codegen(_) | CompileError::Perf(_) => 5,
        }
    }

    /// Machine-readable error code for stderr.
    pub fn code(&self) -> &'static str {
        match self {
            CompileError::Graph(GraphError::Syntax(_)) => "SyntaxError",
            CompileError::Graph(GraphError::Schema { .. }) => "SchemaError",
            CompileError::Graph(GraphError::Shape { .. }) => "ShapeError",
            CompileError::Graph(GraphError::Cyclic(_)) => "CyclicGraph",
            CompileError::Validation(_) => "ValidationFailed",
            CompileError::Dispatch(_) => "PolicyUnsatisfiable",
            CompileError::Tile { source: TileError::SpaceTooLarge(_), .. } => "SpaceTooLarge",
            CompileError::Tile { .. } => "NoFeasibleTile",
            CompileError::Memplan(MemplanError::OutOfMemory { .. }) => "OutOfMemory",
            CompileError::Memplan(MemplanError::DtypeMismatch { .. }) => "DtypeMismatch",
            CompileError::Memplan(_) => "MemplanError",
            CompileError::Codegen(_) => "CodegenError",
            CompileError::Perf(_) => "InconsistentSchedule",
            CompileError::MissingPool(_) => "SchemaError",
        }
    }
}

/// Compile an already-parsed graph.
pub fn compile_graph(
    graph: &Graph,
    platform: &PlatformSpec,
    options: CompileOptions,
) -> Result<Artifacts, CompileError> {
    let diags = validate(graph);
    if !diags.is_empty() {
        return Err(CompileError::Validation(diags));
    }
    let graph = infer_shapes(graph)?;

    let regions = match_patterns(&graph);
    let partition = assign_accelerators(&regions, &graph, platform, options.policy)?;

    let mut tiles = BTreeMap::new();
    let mut images = Vec::new();
    for (idx, unit) in partition.units.iter().enumerate() {
        let Unit::Accel { target, region } = unit else { continue };
        let accel = platform
            .accelerator(target)
            .ok_or_else(|| CompileError::MissingPool(target.clone()))?;
        if let Some(geometry) = region.geometry {
            let problem = TilingProblem::for_accelerator(geometry, accel, platform, options.heuristics)
                .map_err(|source| CompileError::Tile { unit: idx, source })?;
            let solution =
                solve_tiling(&problem).map_err(|source| CompileError::Tile { unit: idx, source })?;
            tiles.insert(idx, solution);
            images.push(layout_weights(idx, region, &graph, accel)?);
        }
    }

    let intervals = liveness(&partition, &graph);
    let l2 = platform.pool(L2_POOL).ok_or_else(|| CompileError::MissingPool(L2_POOL.into()))?;
    let plan = plan_l2(&intervals, l2)?;

    let schedule = emit_schedule(&graph, &partition, &tiles, &plan, &images, platform)?;
    let storage = weight_storage_report(&partition, &graph, &images);

    Ok(Artifacts { graph, partition, tiles, intervals, plan, images, schedule, storage })
}

/// Compile from graph JSON text.
pub fn compile(text: &str, platform: &PlatformSpec, options: CompileOptions) -> Result<Artifacts, CompileError> {
    let graph = parse_graph(text)?;
    compile_graph(&graph, platform, options)
}

// ── Tiling benchmark sweep ───────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchPoint {
    pub layer: String,
    pub budget: u64,
    pub heuristics: bool,
    pub cycles: u64,
    /// The whole layer fit the budget; no tiling was needed.
    pub single_tile: bool,
}

pub const DEFAULT_BENCH_BUDGETS: [u64; 6] = [262_144, 131_072, 65_536, 32_768, 16_384, 8192];

/// Latency of each bundled single-layer graph across shrinking io budgets,
/// with and without the accelerator-aware heuristics.
pub fn bench_tiling_sweep(
    layers: &[(String, Graph)],
    platform: &PlatformSpec,
    budgets: &[u64],
) -> Result<Vec<BenchPoint>, CompileError> {
    let mut points = Vec::new();
    for (name, graph) in layers {
        for &budget in budgets {
            for heuristics in [true, false] {
                let platform = platform
                    .clone()
                    .with_pool_capacity(crate::platform::L1_IO_POOL, budget)
                    .map_err(|_| CompileError::MissingPool(crate::platform::L1_IO_POOL.into()))?;
                let artifacts = compile_graph(
                    graph,
                    &platform,
                    CompileOptions { policy: DispatchPolicy::Digital, heuristics },
                )?;
                let report = simulate(&artifacts.schedule, &platform)?;
                let single_tile = artifacts.tiles.values().all(TileSolution::is_single_tile);
                points.push(BenchPoint {
                    layer: name.clone(),
                    budget,
                    heuristics,
                    cycles: report.total_cycles,
                    single_tile,
                });
            }
        }
    }
    Ok(points)
}

pub fn bench_csv(points: &[BenchPoint]) -> String {
    let mut out = String::from("layer,budget,heuristics,cycles,single_tile\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.layer,
            p.budget,
            if p.heuristics { "on" } else { "off" },
            p.cycles,
            p.single_tile
        ));
    }
    out
}
