//! Standardized graph tensors and disjoint-union batches.

use std::rc::Rc;
use std::sync::Arc;

use gridflow_core::features::{EDGE_FEATURES, NODE_FEATURES, TARGETS};
use gridflow_core::network::{AdmittanceMatrix, BusType, LoadPoly};
use gridflow_core::{ScenarioGraph, Standardizer};

use crate::tensor::Tensor;

/// One scenario graph with standardized inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub system: String,
    pub index: usize,
    pub n: usize,
    pub bus_types: Vec<BusType>,
    /// Standardized node features, `N × NODE_FEATURES`.
    pub features: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_branch: Vec<Option<usize>>,
    /// Edge features in physical units, `E × EDGE_FEATURES`.
    pub edge_features: Tensor,
    pub mask: Tensor,
    /// Targets in physical units (degrees for the angle), `N × 4`.
    pub targets: Tensor,
    /// Targets in standardized space, `N × 4`.
    pub targets_std: Tensor,
    pub ybus: AdmittanceMatrix,
    pub loads: Vec<LoadPoly>,
}

impl PreparedGraph {
    pub fn new(graph: &ScenarioGraph, standardizer: &Standardizer) -> Self {
        let n = graph.n_nodes;
        let flat = |rows: &[[f64; TARGETS]]| {
            Tensor::from_vec(n, TARGETS, rows.iter().flat_map(|r| r.iter().copied()).collect())
        };
        let targets = flat(&graph.targets);
        let mut targets_std = targets.clone();
        for i in 0..n {
            for c in 0..TARGETS {
                targets_std.set(i, c, standardizer.transform_target(c, targets.get(i, c)));
            }
        }
        let (src, dst) = graph.edges.iter().copied().unzip();
        PreparedGraph {
            system: graph.system.clone(),
            index: graph.index,
            n,
            bus_types: graph.bus_types.clone(),
            features: Tensor::from_vec(
                n,
                NODE_FEATURES,
                standardizer.transform_features(&graph.node_features),
            ),
            src,
            dst,
            edge_branch: graph.edge_branch.clone(),
            edge_features: Tensor::from_vec(
                graph.n_edges(),
                EDGE_FEATURES,
                graph.edge_features.clone(),
            ),
            mask: flat(&graph.mask),
            targets,
            targets_std,
            ybus: graph.ybus.clone(),
            loads: graph.loads.clone(),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// Several graphs merged into one block-diagonal graph.
#[derive(Debug, Clone)]
pub struct Batch {
    pub graphs: Vec<Arc<PreparedGraph>>,
    /// First node of each graph, plus the total node count.
    pub node_offsets: Vec<usize>,
    /// First edge of each graph, plus the total edge count.
    pub edge_offsets: Vec<usize>,
    pub features: Tensor,
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub edge_features: Tensor,
    pub mask: Tensor,
    pub targets: Tensor,
    pub targets_std: Tensor,
}

impl Batch {
    pub fn new(graphs: Vec<Arc<PreparedGraph>>) -> Self {
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for g in &graphs {
            let base = *node_offsets.last().unwrap();
            src.extend(g.src.iter().map(|&s| s + base));
            dst.extend(g.dst.iter().map(|&d| d + base));
            node_offsets.push(base + g.n);
            edge_offsets.push(edge_offsets.last().unwrap() + g.n_edges());
        }
        let stack = |f: fn(&PreparedGraph) -> &Tensor, cols: usize| {
            if graphs.is_empty() {
                return Tensor::zeros(0, cols);
            }
            Tensor::vstack(&graphs.iter().map(|g| f(g)).collect::<Vec<_>>())
        };
        Batch {
            features: stack(|g| &g.features, NODE_FEATURES),
            edge_features: stack(|g| &g.edge_features, EDGE_FEATURES),
            mask: stack(|g| &g.mask, TARGETS),
            targets: stack(|g| &g.targets, TARGETS),
            targets_std: stack(|g| &g.targets_std, TARGETS),
            src: Rc::new(src),
            dst: Rc::new(dst),
            node_offsets,
            edge_offsets,
            graphs,
        }
    }

    pub fn single(graph: Arc<PreparedGraph>) -> Self {
        Self::new(vec![graph])
    }

    pub fn n_graphs(&self) -> usize {
        self.graphs.len()
    }

    pub fn n_nodes(&self) -> usize {
        *self.node_offsets.last().unwrap()
    }

    pub fn n_edges(&self) -> usize {
        *self.edge_offsets.last().unwrap()
    }

    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offsets[g]..self.node_offsets[g + 1]
    }

    pub fn edge_range(&self, g: usize) -> std::ops::Range<usize> {
        self.edge_offsets[g]..self.edge_offsets[g + 1]
    }
}
