//! Dataset loading and conversion to model-ready graphs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use gridflow_core::{load_dataset, Dataset, Network, Split, Standardizer};
use gridflow_model::PreparedGraph;

use crate::args::SplitArg;

pub fn load_all(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    let datasets = paths
        .iter()
        .map(|p| load_dataset(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeMap::new();
    for (d, p) in datasets.iter().zip(paths) {
        if let Some(prev) = seen.insert(d.system().to_string(), p) {
            bail!("{} and {} both hold system {}", prev.display(), p.display(), d.system());
        }
    }
    Ok(datasets)
}

pub fn fit_standardizer(datasets: &[Dataset]) -> Result<Standardizer> {
    Ok(Standardizer::fit(datasets.iter().flat_map(|d| d.graphs(Split::Train)))?)
}

pub fn prepare(datasets: &[Dataset], split: SplitArg, std: &Standardizer) -> Vec<Arc<PreparedGraph>> {
    datasets
        .iter()
        .flat_map(|d| d.records.iter())
        .filter(|r| match split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Val => r.split == Split::Val,
            SplitArg::Test => r.split == Split::Test,
            SplitArg::All => true,
        })
        .map(|r| Arc::new(PreparedGraph::new(&r.graph, std)))
        .collect()
}

pub fn systems(datasets: &[Dataset]) -> Vec<String> {
    datasets.iter().map(|d| d.system().to_string()).collect()
}

pub fn networks(datasets: &[Dataset]) -> BTreeMap<String, Network> {
    datasets
        .iter()
        .map(|d| (d.system().to_string(), d.header.network.clone()))
        .collect()
}
