//! Newline-delimited JSON dataset files: one header line followed by one
//! self-contained record per scenario, in index order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, GridResult};
use crate::features::{build_graph, ScenarioGraph, Standardizer};
use crate::network::{assemble_ybus, Network};
use crate::scenario::{assign_splits, generate_scenarios, RandomizationConfig, Scenario, Split};
use crate::solver::{compute_injection_mismatch, max_abs_mismatch};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_KIND: &str = "gridflow-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: String,
    pub system: String,
    pub config: RandomizationConfig,
    pub network: Network,
    /// Reserved; statistics are fitted at training time and stored with the model.
    pub standardizer: Option<Standardizer>,
    pub n_scenarios: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRecord {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub scenario: Scenario,
    pub graph: ScenarioGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<ScenarioRecord>,
}

impl Dataset {
    pub fn system(&self) -> &str {
        &self.header.system
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ScenarioRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn graphs(&self, split: Split) -> Vec<&ScenarioGraph> {
        self.split(split).map(|r| &r.graph).collect()
    }
}

/// Generates, solves and featurizes `n` scenarios of `base`.
pub fn generate_dataset(base: &Network, n: usize, config: &RandomizationConfig) -> GridResult<Dataset> {
    let scenarios = generate_scenarios(base, n, config)?;
    let splits = assign_splits(n, config.seed);
    let records = scenarios
        .into_par_iter()
        .zip(splits)
        .enumerate()
        .map(|(index, (scenario, split))| {
            let graph = build_graph(base, &scenario, index)?;
            Ok(ScenarioRecord {
                index,
                seed: scenario.rng_seed,
                split,
                scenario,
                graph,
            })
        })
        .collect::<GridResult<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            kind: DATASET_KIND.into(),
            system: base.name.clone(),
            config: config.clone(),
            network: base.clone(),
            standardizer: None,
            n_scenarios: n,
        },
        records,
    })
}

pub fn write_dataset(dataset: &Dataset, writer: impl Write) -> GridResult<()> {
    let mut w = BufWriter::new(writer);
    serde_json::to_writer(&mut w, &dataset.header)?;
    w.write_all(b"\n")?;
    for record in &dataset.records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> GridResult<()> {
    write_dataset(dataset, File::create(path)?)
}

pub fn read_dataset(reader: impl std::io::Read) -> GridResult<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let first = lines
        .next()
        .ok_or_else(|| GridError::Format("missing header line".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.kind != DATASET_KIND {
        return Err(GridError::Format(format!("unexpected kind {:?}", header.kind)));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(GridError::Format(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut records = Vec::with_capacity(header.n_scenarios);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScenarioRecord = serde_json::from_str(&line)?;
        if record.index != records.len() {
            return Err(GridError::Format(format!(
                "record {} out of order (expected {})",
                record.index,
                records.len()
            )));
        }
        records.push(record);
    }
    if records.len() != header.n_scenarios {
        return Err(GridError::Format(format!(
            "header announces {} scenarios, file holds {}",
            header.n_scenarios,
            records.len()
        )));
    }
    Ok(Dataset { header, records })
}

pub fn load_dataset(path: impl AsRef<Path>) -> GridResult<Dataset> {
    read_dataset(File::open(path)?)
}

/// Largest power-balance mismatch of every stored label, recomputed on its scenario network.
pub fn verify_labels(dataset: &Dataset) -> GridResult<Vec<f64>> {
    let base = &dataset.header.network;
    dataset
        .records
        .par_iter()
        .map(|r| {
            let net = r.scenario.network(base);
            let y = assemble_ybus(&net)?;
            let m = compute_injection_mismatch(&net, &y, &r.scenario.solution.state());
            Ok(max_abs_mismatch(&m))
        })
        .collect()
}
