use std::sync::Arc;

use gridflow_core::{generate_dataset, Network, RandomizationConfig, Standardizer};

use crate::batch::PreparedGraph;

pub fn case(name: &str) -> Network {
    let path = format!("{}/../../cases/{name}.json", env!("CARGO_MANIFEST_DIR"));
    Network::from_json_file(path).unwrap()
}

/// `n` generated scenarios of a shipped case, standardized on themselves.
pub fn prepared(name: &str, n: usize, seed: u64) -> (Vec<Arc<PreparedGraph>>, Standardizer) {
    let config = RandomizationConfig {
        seed,
        ..Default::default()
    };
    let data = generate_dataset(&case(name), n, &config).unwrap();
    let graphs: Vec<_> = data.records.iter().map(|r| &r.graph).collect();
    let std = Standardizer::fit(graphs.iter().copied()).unwrap();
    let out = graphs
        .iter()
        .map(|g| Arc::new(PreparedGraph::new(g, &std)))
        .collect();
    (out, std)
}
