//! Ahead-of-time deployment compiler and cycle-accurate-ish performance
//! model for quantized DNN graphs on heterogeneous TinyML SoCs.
//!
//! The pipeline: parse and validate a graph, pattern-match offloadable
//! operator chains, assign them to accelerators under a deployment policy,
//! solve memory-constrained tiling per layer, plan L2 activation memory,
//! lay out packed weight images, emit an executable tile/DMA schedule, and
//! either run it bit-exactly against the reference interpreter or estimate
//! its latency with the analytical cost model.

pub mod dispatch;
pub mod fixtures;
pub mod exec;
pub mod graph;
pub mod memplan;
pub mod perf;
pub mod pipeline;
pub mod platform;
pub mod schedule;
pub mod tile;
