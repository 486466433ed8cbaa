//! Inputs shared by the benchmarks.

use stitch_core::{parse_graph, Graph};

pub fn fixture(name: &str) -> Graph {
    let text = match name {
        "attention" => include_str!("../../core/fixtures/attention.json"),
        "packing" => include_str!("../../core/fixtures/packing.json"),
        "block" => include_str!("../../core/fixtures/block.json"),
        other => panic!("unknown fixture {other}"),
    };
    parse_graph(text).expect("bundled fixture parses")
}
