//! Regenerate the bundled fixture files under `fixtures/` at the repo
//! root. The committed files are canonical; a test asserts they match the
//! builders, so rerun this after touching `fixtures.rs`:
//!
//! ```sh
//! cargo run -p socflow-core --example gen_fixtures
//! ```

use std::path::Path;

use socflow_core::fixtures::all_fixtures;
use socflow_core::graph::serialize_graph;
use socflow_core::platform::{builtin_diana, serialize_platform};

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = root.join("fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    for (name, graph) in all_fixtures() {
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, serialize_graph(&graph)).unwrap();
        println!("wrote {}", path.display());
    }
    let diana = dir.join("diana.json");
    std::fs::write(&diana, serialize_platform(&builtin_diana())).unwrap();
    println!("wrote {}", diana.display());
}
