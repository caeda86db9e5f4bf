#![no_main]
//! Prerequisite graphs: any accepted graph is a DAG and survives a round trip.

use libfuzzer_sys::fuzz_target;
use mccpo::feasibility::PrereqGraph;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = PrereqGraph::from_json(text) {
        let again = PrereqGraph::from_json(&g.to_json()).expect("own output parses");
        assert_eq!(g, again);
        assert_eq!(g.depths().len(), g.num_concepts());
    }
});
