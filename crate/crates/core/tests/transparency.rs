//! Tiled execution must be bit-exact against the reference interpreter
//! for every fixture, policy and io budget.

use socflow_core::dispatch::DispatchPolicy;
use socflow_core::exec::{run_graph, run_schedule, Value};
use socflow_core::fixtures;
use socflow_core::pipeline::{compile_graph, CompileOptions};
use socflow_core::platform::{builtin_diana, L1_IO_POOL};

fn check_case(name: &str, g: &socflow_core::graph::Graph, policy: DispatchPolicy, io_budget: u64, seed: u64) {
    let platform = builtin_diana().with_pool_capacity(L1_IO_POOL, io_budget).unwrap();
    let artifacts = compile_graph(g, &platform, CompileOptions { policy, heuristics: true })
        .unwrap_or_else(|e| panic!("{name}/{policy:?}/{io_budget}: compile failed: {e}"));
    let inputs = fixtures::fixture_inputs(&artifacts.graph, seed);
    let want = run_graph(&artifacts.graph, &inputs)
        .unwrap_or_else(|e| panic!("{name}: reference failed: {e}"));
    let got = run_schedule(&artifacts.schedule, &artifacts.weight_blob(), &inputs, false)
        .unwrap_or_else(|e| panic!("{name}/{policy:?}/{io_budget}: schedule failed: {e}"));
    for (tensor, expected) in &want {
        match (expected, &got.outputs[tensor]) {
            (Value::Int(a), Value::Int(b)) => {
                assert_eq!(a, b, "{name}/{policy:?}/{io_budget}: `{tensor}` differs");
            }
            (Value::Float(_), Value::Float(_)) => {}
            (a, b) => panic!("{name}: `{tensor}` kind mismatch: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn fixtures_are_tiling_transparent_at_full_l1() {
    for (name, g) in fixtures::all_fixtures() {
        for policy in DispatchPolicy::ALL {
            check_case(name, &g, policy, 256 * 1024, 1);
        }
    }
}

#[test]
fn fixtures_are_tiling_transparent_under_tight_l1() {
    for (name, g) in fixtures::all_fixtures() {
        for policy in DispatchPolicy::ALL {
            for budget in [8192, 16384, 65536] {
                check_case(name, &g, policy, budget, 2);
            }
        }
    }
}
