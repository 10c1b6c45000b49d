//! Batch front door for the deployment pipeline: compile quantized graphs
//! for a heterogeneous SoC, estimate latency, execute schedules bit-exactly,
//! solve single-layer tilings and run the tiling benchmark sweep.
//!
//! Exit codes: 0 ok, 2 schema/validation problems, 3 no feasible tile,
//! 4 out of activation memory, 5 internal inconsistencies.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use socflow_core::dispatch::DispatchPolicy;
use socflow_core::exec::{run_graph, run_schedule, ExecResult, Value};
use socflow_core::graph::{infer_shapes, parse_graph, validate, DataType};
use socflow_core::perf::{render_table, simulate, LatencyReport};
use socflow_core::pipeline::{
    bench_csv, bench_tiling_sweep, compile, CompileError, CompileOptions, DEFAULT_BENCH_BUDGETS,
};
use socflow_core::platform::{builtin_diana, parse_platform, PlatformSpec};
use socflow_core::schedule::{emit_c_driver, parse_schedule, serialize_schedule};
use socflow_core::tile::{objective_breakdown, solve_tiling, LayerGeometry, LayerKind, TilingProblem};

#[derive(Parser)]
#[command(
    name = "socflow",
    version,
    about = "Deployment compiler and cycle model for quantized DNNs on heterogeneous TinyML SoCs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PlatformArgs {
    /// Platform JSON file, or the name of a built-in preset (`diana`).
    #[arg(long, default_value = "diana")]
    platform: String,
    /// Override a pool capacity, e.g. `--pool l2=4096`. Repeatable.
    #[arg(long = "pool", value_name = "NAME=BYTES")]
    pools: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a graph into a schedule, memory plan and weight images.
    Compile {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        platform: PlatformArgs,
        /// Dispatch policy: cpu_only, digital, analog or mixed.
        #[arg(long, default_value = "mixed")]
        mode: String,
        /// Output directory for the artifact tree.
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Extra artifacts: comma-separated set from {c, partition, report}.
        #[arg(long, value_delimiter = ',')]
        emit: Vec<String>,
        /// Disable the accelerator-aware tiling heuristics.
        #[arg(long)]
        no_heuristics: bool,
    },
    /// Estimate the latency of a compiled schedule.
    Simulate {
        #[arg(long)]
        schedule: PathBuf,
        #[command(flatten)]
        platform: PlatformArgs,
        /// Where to write the report JSON (printed as a table either way).
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Execute a graph (reference interpreter) or a compiled schedule.
    Run {
        #[arg(long, conflicts_with = "schedule")]
        graph: Option<PathBuf>,
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Weight blob for schedule execution; defaults to weights.bin
        /// beside the schedule.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input tensors: {"tensors": {"name": [values...]}}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Include per-unit output snapshots.
        #[arg(long)]
        trace: bool,
    },
    /// Solve the tiling problem of a single layer.
    Tile {
        /// Layer description JSON; see the README for the schema.
        #[arg(long)]
        layer: PathBuf,
        #[command(flatten)]
        platform: PlatformArgs,
        #[arg(long)]
        no_heuristics: bool,
    },
    /// Sweep the bundled layer set over shrinking io budgets, with and
    /// without tiling heuristics, and emit a CSV.
    BenchFig4 {
        #[command(flatten)]
        platform: PlatformArgs,
        /// Budgets in bytes, largest first.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<u64>,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Render a latency report JSON as a table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

// ── Error plumbing ───────────────────────────────────────────────────

struct CliError {
    code: &'static str,
    message: String,
    exit: u8,
}

impl CliError {
    fn new(code: &'static str, exit: u8, message: impl Into<String>) -> CliError {
        CliError { code, message: message.into(), exit }
    }

    fn io(path: &Path, e: std::io::Error) -> CliError {
        CliError::new("IoError", 2, format!("{}: {e}", path.display()))
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> CliError {
        CliError { code: e.code(), message: e.to_string(), exit: e.exit_code() as u8 }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_platform(args: &PlatformArgs) -> Result<PlatformSpec, CliError> {
    let mut spec = if args.platform == "diana" {
        builtin_diana()
    } else {
        let text = read_file(Path::new(&args.platform))?;
        parse_platform(&text).map_err(|e| CliError::new("SchemaError", 2, e.to_string()))?
    };
    for pool_override in &args.pools {
        let (name, bytes) = pool_override
            .split_once('=')
            .ok_or_else(|| CliError::new("SchemaError", 2, format!("bad --pool `{pool_override}`")))?;
        let capacity: u64 = bytes
            .parse()
            .map_err(|_| CliError::new("SchemaError", 2, format!("bad --pool bytes `{bytes}`")))?;
        spec = spec
            .with_pool_capacity(name, capacity)
            .map_err(|e| CliError::new("SchemaError", 2, e.to_string()))?;
    }
    Ok(spec)
}

fn parse_policy(mode: &str) -> Result<DispatchPolicy, CliError> {
    DispatchPolicy::parse(mode)
        .ok_or_else(|| CliError::new("SchemaError", 2, format!("unknown mode `{mode}`")))
}

fn pretty<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serialization cannot fail");
    text.push('\n');
    text.into_bytes()
}

// ── Subcommands ──────────────────────────────────────────────────────

fn cmd_compile(
    graph: &Path,
    platform_args: &PlatformArgs,
    mode: &str,
    out: &Path,
    emit: &[String],
    no_heuristics: bool,
) -> Result<(), CliError> {
    let platform = load_platform(platform_args)?;
    let policy = parse_policy(mode)?;
    for item in emit {
        if !matches!(item.as_str(), "c" | "partition" | "report") {
            return Err(CliError::new("SchemaError", 2, format!("unknown --emit `{item}`")));
        }
    }
    let text = read_file(graph)?;
    let artifacts = compile(&text, &platform, CompileOptions { policy, heuristics: !no_heuristics })?;

    // everything compiled; only now touch the filesystem
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join("schedule.json"), serialize_schedule(&artifacts.schedule).as_bytes())?;
    write_file(&out.join("memplan.json"), &pretty(&artifacts.plan))?;
    write_file(&out.join("weights.bin"), &artifacts.weight_blob())?;
    write_file(&out.join("weights.json"), &pretty(&artifacts.schedule.manifest))?;
    write_file(&out.join("storage.json"), &pretty(&artifacts.storage))?;
    if emit.iter().any(|e| e == "partition") {
        write_file(&out.join("partition.json"), &pretty(&artifacts.partition))?;
    }
    if emit.iter().any(|e| e == "c") {
        write_file(&out.join("driver.c"), emit_c_driver(&artifacts.schedule).as_bytes())?;
    }
    if emit.iter().any(|e| e == "report") {
        let report = simulate(&artifacts.schedule, &platform)
            .map_err(|e| CliError::new("InconsistentSchedule", 5, e.to_string()))?;
        write_file(&out.join("report.json"), &pretty(&report))?;
    }
    println!(
        "compiled {} unit(s), activation peak {} B, weights {} B -> {}",
        artifacts.partition.units.len(),
        artifacts.plan.peak,
        artifacts.schedule.manifest.total_bytes,
        out.display()
    );
    Ok(())
}

fn cmd_simulate(schedule: &Path, platform_args: &PlatformArgs, out: Option<&Path>) -> Result<(), CliError> {
    let platform = load_platform(platform_args)?;
    let text = read_file(schedule)?;
    let schedule = parse_schedule(&text).map_err(|e| CliError::new("SchemaError", 2, e.to_string()))?;
    let report = simulate(&schedule, &platform)
        .map_err(|e| CliError::new("InconsistentSchedule", 5, e.to_string()))?;
    print!("{}", render_table(&report));
    if let Some(path) = out {
        write_file(path, &pretty(&report))?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct InputDoc {
    tensors: BTreeMap<String, Vec<i32>>,
}

fn render_outputs(result: &ExecResult, trace: bool) -> Vec<u8> {
    #[derive(serde::Serialize)]
    struct OutputDoc<'a> {
        outputs: &'a BTreeMap<String, Value>,
        #[serde(skip_serializing_if = "Option::is_none")]
        trace: Option<&'a Vec<socflow_core::exec::UnitSnapshot>>,
    }
    pretty(&OutputDoc { outputs: &result.outputs, trace: trace.then_some(&result.trace) })
}

fn cmd_run(
    graph: Option<&Path>,
    schedule: Option<&Path>,
    weights: Option<&Path>,
    input: &Path,
    out: Option<&Path>,
    trace: bool,
) -> Result<(), CliError> {
    let doc: InputDoc = serde_json::from_str(&read_file(input)?)
        .map_err(|e| CliError::new("SchemaError", 2, format!("bad input file: {e}")))?;
    let exec_err = |e: socflow_core::exec::ExecError| CliError::new("ExecError", 5, e.to_string());

    let result = match (graph, schedule) {
        (Some(path), None) => {
            let g = parse_graph(&read_file(path)?)
                .map_err(|e| CliError::new("SchemaError", 2, e.to_string()))?;
            let diags = validate(&g);
            if !diags.is_empty() {
                let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                return Err(CliError::new("ValidationFailed", 2, lines.join("\n")));
            }
            let g = infer_shapes(&g).map_err(|e| CliError::new("ShapeError", 2, e.to_string()))?;
            let outputs = run_graph(&g, &doc.tensors).map_err(exec_err)?;
            ExecResult { outputs, trace: Vec::new() }
        }
        (None, Some(path)) => {
            let s = parse_schedule(&read_file(path)?)
                .map_err(|e| CliError::new("SchemaError", 2, e.to_string()))?;
            let blob_path = match weights {
                Some(w) => w.to_path_buf(),
                None => path.parent().unwrap_or(Path::new(".")).join("weights.bin"),
            };
            let blob = fs::read(&blob_path).map_err(|e| CliError::io(&blob_path, e))?;
            run_schedule(&s, &blob, &doc.tensors, trace).map_err(exec_err)?
        }
        _ => return Err(CliError::new("SchemaError", 2, "pass exactly one of --graph / --schedule")),
    };

    let rendered = render_outputs(&result, trace);
    match out {
        Some(path) => write_file(path, &rendered)?,
        None => print!("{}", String::from_utf8_lossy(&rendered)),
    }
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: String,
    in_ch: usize,
    out_ch: usize,
    #[serde(default)]
    in_h: usize,
    #[serde(default)]
    in_w: usize,
    #[serde(default)]
    kernel: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    weight_dtype: String,
    target: String,
}

fn one() -> usize {
    1
}

fn cmd_tile(layer: &Path, platform_args: &PlatformArgs, no_heuristics: bool) -> Result<(), CliError> {
    let platform = load_platform(platform_args)?;
    let doc: LayerDoc = serde_json::from_str(&read_file(layer)?)
        .map_err(|e| CliError::new("SchemaError", 2, format!("bad layer file: {e}")))?;
    let dtype = match doc.weight_dtype.as_str() {
        "i8" => DataType::I8,
        "ternary" => DataType::Ternary,
        other => return Err(CliError::new("SchemaError", 2, format!("bad weight dtype `{other}`"))),
    };
    let bits = dtype.weight_bits();
    let geometry = match doc.kind.as_str() {
        "conv2d" => LayerGeometry::conv2d(
            doc.in_ch, doc.out_ch, doc.in_h, doc.in_w, doc.kernel, doc.stride, doc.padding, bits,
        ),
        "dwconv2d" => {
            LayerGeometry::dwconv2d(doc.in_ch, doc.in_h, doc.in_w, doc.kernel, doc.stride, doc.padding, bits)
        }
        "dense" => Some(LayerGeometry::dense(doc.in_ch, doc.out_ch, bits)),
        other => return Err(CliError::new("SchemaError", 2, format!("bad layer kind `{other}`"))),
    }
    .ok_or_else(|| CliError::new("ShapeError", 2, "layer has a degenerate output dim"))?;

    let accel = platform
        .accelerator(&doc.target)
        .ok_or_else(|| CliError::new("SchemaError", 2, format!("unknown accelerator `{}`", doc.target)))?;
    let problem = TilingProblem::for_accelerator(geometry, accel, &platform, !no_heuristics)
        .map_err(|e| CliError::new("SchemaError", 2, e.to_string()))?;
    let solution = solve_tiling(&problem).map_err(|e| {
        let code = match e {
            socflow_core::tile::TileError::NoFeasibleTile(_) => "NoFeasibleTile",
            _ => "TileError",
        };
        CliError::new(code, 3, e.to_string())
    })?;

    #[derive(serde::Serialize)]
    struct TileDoc {
        kind: LayerKind,
        solution: socflow_core::tile::TileSolution,
        objective: socflow_core::tile::ObjectiveBreakdown,
    }
    let objective = objective_breakdown(&problem.geometry, &solution.dims, &problem);
    let doc = TileDoc { kind: problem.geometry.kind, solution, objective };
    print!("{}", String::from_utf8_lossy(&pretty(&doc)));
    Ok(())
}

fn cmd_bench(platform_args: &PlatformArgs, budgets: &[u64], out: Option<&Path>) -> Result<(), CliError> {
    let platform = load_platform(platform_args)?;
    let budgets = if budgets.is_empty() { DEFAULT_BENCH_BUDGETS.to_vec() } else { budgets.to_vec() };
    let layers = socflow_core::fixtures::bench_layers();
    let points = bench_tiling_sweep(&layers, &platform, &budgets)?;
    let csv = bench_csv(&points);
    match out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_report(report: &Path) -> Result<(), CliError> {
    let parsed: LatencyReport = serde_json::from_str(&read_file(report)?)
        .map_err(|e| CliError::new("SchemaError", 2, format!("bad report file: {e}")))?;
    print!("{}", render_table(&parsed));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compile { graph, platform, mode, out, emit, no_heuristics } => {
            cmd_compile(graph, platform, mode, out, emit, *no_heuristics)
        }
        Command::Simulate { schedule, platform, out } => cmd_simulate(schedule, platform, out.as_deref()),
        Command::Run { graph, schedule, weights, input, out, trace } => cmd_run(
            graph.as_deref(),
            schedule.as_deref(),
            weights.as_deref(),
            input,
            out.as_deref(),
            *trace,
        ),
        Command::Tile { layer, platform, no_heuristics } => cmd_tile(layer, platform, *no_heuristics),
        Command::BenchFig4 { platform, budgets, out } => cmd_bench(platform, budgets, out.as_deref()),
        Command::Report { report } => cmd_report(report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(e.exit)
        }
    }
}
