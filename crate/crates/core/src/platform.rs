//! Declarative hardware model: accelerator arrays, capability rules, memory
//! pools and cost parameters, plus the built-in `diana` preset (RISC-V host,
//! 16x16 digital SIMD array, 1152x512 analog in-memory-compute array, shared
//! 256 kB L1 io memory, per-accelerator weight memories, 512 kB L2).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DataType;

// ── Types ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryPool {
    pub name: String,
    /// Capacity in bytes, > 0.
    pub capacity: u64,
}

/// Fused operator chains an accelerator can execute as one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Conv2dRequant,
    Dwconv2dRequant,
    DenseRequant,
    AddRequant,
}

impl PatternKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::Conv2dRequant => "conv2d_requant",
            PatternKind::Dwconv2dRequant => "dwconv2d_requant",
            PatternKind::DenseRequant => "dense_requant",
            PatternKind::AddRequant => "add_requant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceleratorKind {
    DigitalSimd,
    AnalogImc,
}

/// Activation memory layout an accelerator consumes. Only the
/// channel-major row/column layout is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataLayout {
    CYX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Fixed host-side cost per accelerator invocation.
    pub call_overhead_cycles: u64,
    /// Analog array latency per full-array pass.
    pub op_latency_cycles: u64,
    /// Bandwidth for filling the accelerator weight memory.
    pub weight_load_bytes_per_cycle: u64,
    /// Depthwise throughput ceiling (single PE row).
    pub dw_macs_per_cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorSpec {
    pub name: String,
    pub kind: AcceleratorKind,
    pub array_rows: usize,
    pub array_cols: usize,
    /// Pattern kinds this accelerator accepts.
    pub patterns: Vec<PatternKind>,
    pub weight_dtype: DataType,
    /// Largest supported kernel extent per axis.
    pub max_kernel: usize,
    pub allowed_strides: Vec<usize>,
    pub required_layout: DataLayout,
    /// Input precision in bits; 7 means inputs are clipped to [0, 127]
    /// before the array sees them.
    pub input_bits: u8,
    pub io_pool: String,
    pub weight_pool: String,
    /// Analog weight images pad output channels up to power-of-two
    /// multiples of this column group (absent for digital).
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub column_group: Option<usize>,
    pub cost: CostParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuParams {
    pub macs_per_cycle: f64,
    pub per_element_cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaParams {
    /// Setup cost per contiguous 1-D run.
    pub setup_cycles: u64,
    pub bytes_per_cycle: u64,
}

/// Weights of the tiling objective: `alpha` scales memory utilization,
/// `beta` scales each accelerator-aware heuristic term. All terms are
/// normalized to [0, 1] before weighting; `alpha` outweighs the summed
/// heuristic terms by default so that the heuristics break alignment ties
/// among near-maximal-memory tiles instead of trading memory away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub accelerators: Vec<AcceleratorSpec>,
    pub pools: Vec<MemoryPool>,
    pub cpu: CpuParams,
    pub dma: DmaParams,
    pub objective: ObjectiveWeights,
}

impl PlatformSpec {
    pub fn pool(&self, name: &str) -> Option<&MemoryPool> {
        self.pools.iter().find(|p| p.name == name)
    }

    pub fn accelerator(&self, name: &str) -> Option<&AcceleratorSpec> {
        self.accelerators.iter().find(|a| a.name == name)
    }

    /// Override a pool capacity, e.g. for budget sweeps. Unknown pool
    /// names are an error.
    pub fn with_pool_capacity(mut self, name: &str, capacity: u64) -> Result<PlatformSpec, PlatformError> {
        let pool = self
            .pools
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| PlatformError::DanglingPoolRef { who: "override".into(), pool: name.into() })?;
        pool.capacity = capacity;
        Ok(self)
    }
}

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("SyntaxError: {0}")]
    Syntax(String),
    #[error("SchemaError: {0}")]
    Schema(String),
    #[error("DanglingPoolRef: {who} routes to unknown pool `{pool}`")]
    DanglingPoolRef { who: String, pool: String },
}

// ── Parsing and validation ───────────────────────────────────────────

/// Parse and fully validate a platform document. Unknown keys are
/// rejected; routing targets must name declared pools.
pub fn parse_platform(text: &str) -> Result<PlatformSpec, PlatformError> {
    let spec: PlatformSpec = serde_json::from_str(text).map_err(|e| {
        if e.is_syntax() || e.is_eof() {
            PlatformError::Syntax(e.to_string())
        } else {
            PlatformError::Schema(e.to_string())
        }
    })?;
    validate_platform(&spec)?;
    Ok(spec)
}

pub fn validate_platform(spec: &PlatformSpec) -> Result<(), PlatformError> {
    let mut seen = std::collections::HashSet::new();
    for pool in &spec.pools {
        if pool.capacity == 0 {
            return Err(PlatformError::Schema(format!("pool `{}` has zero capacity", pool.name)));
        }
        if !seen.insert(pool.name.as_str()) {
            return Err(PlatformError::Schema(format!("duplicate pool name `{}`", pool.name)));
        }
    }
    for a in &spec.accelerators {
        if a.array_rows == 0 || a.array_cols == 0 {
            return Err(PlatformError::Schema(format!("accelerator `{}` has a zero array dim", a.name)));
        }
        for (pool, what) in [(&a.io_pool, "io"), (&a.weight_pool, "weights")] {
            if spec.pool(pool).is_none() {
                return Err(PlatformError::DanglingPoolRef {
                    who: format!("accelerator `{}` ({what})", a.name),
                    pool: pool.clone(),
                });
            }
        }
        if a.allowed_strides.is_empty() || a.allowed_strides.contains(&0) {
            return Err(PlatformError::Schema(format!("accelerator `{}` has bad stride set", a.name)));
        }
        if a.max_kernel == 0 {
            return Err(PlatformError::Schema(format!("accelerator `{}` has max_kernel 0", a.name)));
        }
    }
    if spec.objective.alpha <= 0.0 {
        return Err(PlatformError::Schema("objective alpha must be > 0".into()));
    }
    if spec.objective.beta < 0.0 {
        return Err(PlatformError::Schema("objective beta must be >= 0".into()));
    }
    if spec.cpu.macs_per_cycle <= 0.0 || spec.cpu.per_element_cycles < 0.0 {
        return Err(PlatformError::Schema("bad cpu cost params".into()));
    }
    if spec.dma.bytes_per_cycle == 0 {
        return Err(PlatformError::Schema("dma bytes_per_cycle must be > 0".into()));
    }
    Ok(())
}

pub fn serialize_platform(spec: &PlatformSpec) -> String {
    let mut s = serde_json::to_string_pretty(spec).expect("platform serialization cannot fail");
    s.push('\n');
    s
}

// ── DIANA preset ─────────────────────────────────────────────────────

pub const DIGITAL: &str = "digital";
pub const ANALOG: &str = "analog";

/// Pool holding activations in main memory. Compiles require it.
pub const L2_POOL: &str = "l2";
pub const L1_IO_POOL: &str = "l1_io";

/// Built-in model of the DIANA SoC: a 16x16-PE digital accelerator
/// (256 8-bit MACs/cycle peak) and a 1152x512-cell analog in-memory-compute
/// accelerator (ternary weights, 7-bit inputs), sharing a 256 kB L1 io
/// memory, with 64 kB digital / 144 kB analog weight memories and 512 kB L2.
pub fn builtin_diana() -> PlatformSpec {
    let cost = CostParams {
        call_overhead_cycles: 1000,
        op_latency_cycles: 1,
        weight_load_bytes_per_cycle: 8,
        dw_macs_per_cycle: 3.75,
    };
    PlatformSpec {
        accelerators: vec![
            AcceleratorSpec {
                name: DIGITAL.into(),
                kind: AcceleratorKind::DigitalSimd,
                array_rows: 16,
                array_cols: 16,
                patterns: vec![
                    PatternKind::Conv2dRequant,
                    PatternKind::Dwconv2dRequant,
                    PatternKind::DenseRequant,
                    PatternKind::AddRequant,
                ],
                weight_dtype: DataType::I8,
                max_kernel: 7,
                allowed_strides: vec![1, 2],
                required_layout: DataLayout::CYX,
                input_bits: 8,
                io_pool: L1_IO_POOL.into(),
                weight_pool: "dig_wmem".into(),
                column_group: None,
                cost: cost.clone(),
            },
            AcceleratorSpec {
                name: ANALOG.into(),
                kind: AcceleratorKind::AnalogImc,
                array_rows: 1152,
                array_cols: 512,
                patterns: vec![PatternKind::Conv2dRequant, PatternKind::DenseRequant],
                weight_dtype: DataType::Ternary,
                max_kernel: 7,
                allowed_strides: vec![1, 2],
                required_layout: DataLayout::CYX,
                input_bits: 7,
                io_pool: L1_IO_POOL.into(),
                weight_pool: "ana_wmem".into(),
                column_group: Some(64),
                cost,
            },
        ],
        pools: vec![
            MemoryPool { name: L1_IO_POOL.into(), capacity: 256 * 1024 },
            MemoryPool { name: "dig_wmem".into(), capacity: 64 * 1024 },
            MemoryPool { name: "ana_wmem".into(), capacity: 144 * 1024 },
            MemoryPool { name: L2_POOL.into(), capacity: 512 * 1024 },
        ],
        cpu: CpuParams { macs_per_cycle: 0.25, per_element_cycles: 2.0 },
        dma: DmaParams { setup_cycles: 10, bytes_per_cycle: 8 },
        objective: ObjectiveWeights { alpha: 80.0, beta: 2.0 },
    }
}

// ── Capability check ─────────────────────────────────────────────────

/// Facts about a matched region that capability rules inspect.
/// The dispatcher derives this from a `MatchedRegion`.
#[derive(Debug, Clone, Copy)]
pub struct RegionFacts {
    pub pattern: PatternKind,
    pub weight_dtype: Option<DataType>,
    /// Kernel extent per axis (fy, fx); None for dense and add.
    pub kernel: Option<(usize, usize)>,
    pub stride: Option<usize>,
}

/// Pure capability predicate: does the accelerator accept this region?
/// Checks the supported pattern set, weight dtype, stride set and kernel
/// bound, in that order.
pub fn supports(a: &AcceleratorSpec, facts: &RegionFacts) -> bool {
    if !a.patterns.contains(&facts.pattern) {
        return false;
    }
    if let Some(dt) = facts.weight_dtype {
        if dt != a.weight_dtype {
            return false;
        }
    }
    if let Some(s) = facts.stride {
        if !a.allowed_strides.contains(&s) {
            return false;
        }
    }
    if let Some((fy, fx)) = facts.kernel {
        if fy > a.max_kernel || fx > a.max_kernel {
            return false;
        }
    }
    true
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diana_pool_sizes() {
        let p = builtin_diana();
        assert_eq!(p.pool("l1_io").unwrap().capacity, 262144);
        assert_eq!(p.pool("dig_wmem").unwrap().capacity, 65536);
        assert_eq!(p.pool("ana_wmem").unwrap().capacity, 147456);
        assert_eq!(p.pool("l2").unwrap().capacity, 524288);
    }

    #[test]
    fn diana_analog_wmem_matches_array() {
        let p = builtin_diana();
        let ana = p.accelerator(ANALOG).unwrap();
        // 1152 x 512 cells at 2 bits per ternary weight
        assert_eq!((ana.array_rows * ana.array_cols * 2 / 8) as u64, p.pool("ana_wmem").unwrap().capacity);
    }

    #[test]
    fn diana_digital_peak_macs() {
        let d = builtin_diana();
        let dig = d.accelerator(DIGITAL).unwrap();
        assert_eq!(dig.array_rows * dig.array_cols, 256);
    }

    #[test]
    fn diana_roundtrips_through_parser() {
        let p = builtin_diana();
        let text = serialize_platform(&p);
        let back = parse_platform(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn dangling_pool_ref_rejected() {
        let mut p = builtin_diana();
        p.accelerators[0].weight_pool = "wmem9".into();
        let text = serialize_platform(&p);
        assert!(matches!(parse_platform(&text), Err(PlatformError::DanglingPoolRef { .. })));
    }

    #[test]
    fn zero_alpha_rejected() {
        let mut p = builtin_diana();
        p.objective.alpha = 0.0;
        let text = serialize_platform(&p);
        assert!(matches!(parse_platform(&text), Err(PlatformError::Schema(_))));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = serialize_platform(&builtin_diana()).replace("\"cpu\"", "\"cpu_extra\": 1, \"cpu\"");
        assert!(parse_platform(&text).is_err());
    }

    #[test]
    fn supports_dispatch_rules() {
        let p = builtin_diana();
        let dig = p.accelerator(DIGITAL).unwrap();
        let ana = p.accelerator(ANALOG).unwrap();

        let i8_conv = RegionFacts {
            pattern: PatternKind::Conv2dRequant,
            weight_dtype: Some(DataType::I8),
            kernel: Some((3, 3)),
            stride: Some(1),
        };
        assert!(supports(dig, &i8_conv));
        assert!(!supports(ana, &i8_conv));

        let ternary_conv = RegionFacts { weight_dtype: Some(DataType::Ternary), ..i8_conv };
        assert!(!supports(dig, &ternary_conv));
        assert!(supports(ana, &ternary_conv));

        let dw = RegionFacts { pattern: PatternKind::Dwconv2dRequant, ..i8_conv };
        assert!(supports(dig, &dw));
        assert!(!supports(ana, &dw));

        let big_kernel = RegionFacts { kernel: Some((9, 9)), ..i8_conv };
        assert!(!supports(dig, &big_kernel));
        let bad_stride = RegionFacts { stride: Some(3), ..i8_conv };
        assert!(!supports(dig, &bad_stride));
    }

    #[test]
    fn supports_is_pure() {
        let p = builtin_diana();
        let dig = p.accelerator(DIGITAL).unwrap();
        let facts = RegionFacts {
            pattern: PatternKind::AddRequant,
            weight_dtype: None,
            kernel: None,
            stride: None,
        };
        let first = supports(dig, &facts);
        for _ in 0..10 {
            assert_eq!(first, supports(dig, &facts));
        }
    }

    #[test]
    fn pool_override() {
        let p = builtin_diana().with_pool_capacity("l1_io", 8192).unwrap();
        assert_eq!(p.pool("l1_io").unwrap().capacity, 8192);
        assert!(builtin_diana().with_pool_capacity("nope", 1).is_err());
    }
}
