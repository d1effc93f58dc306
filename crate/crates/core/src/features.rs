//! Scenario graphs: directed edges with self-loops, node and edge feature
//! tensors, bus-type supervision masks and the admittance data needed by the
//! physics loss.
//!
//! Node feature columns, in order:
//!
//! | col | feature |
//! |-----|---------|
//! | 0 | nominal voltage (kV) |
//! | 1, 2 | active, reactive demand at nominal voltage |
//! | 3 | generator active setpoint |
//! | 4 | voltage setpoint (0 at PQ buses) |
//! | 5, 6 | shunt conductance, susceptance |
//! | 7, 8 | generator reactive limits |
//! | 9, 10 | voltage limits |
//! | 11, 12 | system base MVA, frequency |
//! | 13, 14 | buses within one and two hops |
//! | 15 | impedance-weighted distance to the slack |
//! | 16 | impedance-weighted betweenness |
//! | 17 | sum of neighbour net injections (setpoint minus demand) |
//! | 18 | sum of `1/|z|` over incident branches |
//! | 19, 20 | generator within one / two hops |
//! | 21, 22 | slack within one / two hops |
//! | 23..26 | one-hot bus type (PQ, PV, Slack) |
//!
//! Edge feature columns: real and imaginary part of the directed admittance
//! term, one-hot branch kind (Line, Transformer, Impedance, Switch) and rating
//! over base power. Self-loops carry the diagonal admittance and zeros.

use serde::{Deserialize, Serialize};

use crate::error::{GridError, GridResult};
use crate::network::{assemble_ybus, AdmittanceMatrix, BusType, LoadPoly, Network};
use crate::scenario::Scenario;
use crate::topology::{
    electrical_betweenness, electrical_distance_to_slack, neighbourhood, weighted_adjacency,
};

/// Continuous node features before the bus-type one-hot.
pub const CONTINUOUS_FEATURES: usize = 23;
pub const NODE_FEATURES: usize = CONTINUOUS_FEATURES + 3;
pub const EDGE_FEATURES: usize = 7;
/// `[V_m, δ, P_g, Q_g]`.
pub const TARGETS: usize = 4;

pub const NODE_FEATURE_NAMES: [&str; NODE_FEATURES] = [
    "v_nominal",
    "p_demand",
    "q_demand",
    "p_gen_set",
    "v_set",
    "g_shunt",
    "b_shunt",
    "q_gen_min",
    "q_gen_max",
    "v_min",
    "v_max",
    "s_base",
    "frequency",
    "degree_1hop",
    "degree_2hop",
    "distance_to_slack",
    "betweenness",
    "neighbour_net_injection",
    "adjacent_admittance",
    "gen_neighbour_1hop",
    "gen_neighbour_2hop",
    "slack_neighbour_1hop",
    "slack_neighbour_2hop",
    "is_pq",
    "is_pv",
    "is_slack",
];

pub const TARGET_NAMES: [&str; TARGETS] = ["v_m", "delta", "p_g", "q_g"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGraph {
    pub system: String,
    pub index: usize,
    pub n_nodes: usize,
    pub bus_types: Vec<BusType>,
    /// Row-major `n_nodes × NODE_FEATURES`.
    pub node_features: Vec<f64>,
    /// Directed `(source, destination)` pairs: two per in-service branch, then one self-loop per bus.
    pub edges: Vec<(usize, usize)>,
    /// Originating branch of each edge; `None` for self-loops.
    pub edge_branch: Vec<Option<usize>>,
    /// Row-major `edges × EDGE_FEATURES`.
    pub edge_features: Vec<f64>,
    pub mask: Vec<[f64; TARGETS]>,
    /// Solved `[V_m, δ (deg), P_g, Q_g]` per bus.
    pub targets: Vec<[f64; TARGETS]>,
    pub ybus: AdmittanceMatrix,
    pub loads: Vec<LoadPoly>,
}

impl ScenarioGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.node_features[i * NODE_FEATURES..(i + 1) * NODE_FEATURES]
    }

    pub fn edge_row(&self, e: usize) -> &[f64] {
        &self.edge_features[e * EDGE_FEATURES..(e + 1) * EDGE_FEATURES]
    }
}

/// Unknown-variable mask per bus type over `[V_m, δ, P_g, Q_g]`.
pub fn mask_row(bus_type: BusType) -> [f64; TARGETS] {
    match bus_type {
        BusType::PQ => [1.0, 1.0, 0.0, 0.0],
        BusType::PV => [0.0, 1.0, 0.0, 1.0],
        BusType::Slack => [0.0, 0.0, 1.0, 1.0],
    }
}

pub fn apply_mask(bus_types: &[BusType]) -> Vec<[f64; TARGETS]> {
    bus_types.iter().map(|&t| mask_row(t)).collect()
}

/// Node feature matrix of a (perturbed) network; depends only on inputs, never on solved state.
pub fn node_features(net: &Network) -> GridResult<Vec<f64>> {
    let n = net.n_buses();
    let adj = weighted_adjacency(net);
    let distance = electrical_distance_to_slack(net)?;
    let betweenness = electrical_betweenness(net);
    let loads = net.bus_load_polys();
    let gen = net.bus_generation();
    let has_gen = net.has_generator();

    let mut adjacent_admittance = vec![0.0; n];
    for (_, br) in net.active_branches() {
        let y = 1.0 / br.effective_impedance().norm();
        adjacent_admittance[br.from] += y;
        adjacent_admittance[br.to] += y;
    }
    let net_injection: Vec<f64> = (0..n).map(|i| gen[i].0 - loads[i].nominal().0).collect();

    let mut out = Vec::with_capacity(n * NODE_FEATURES);
    for (i, bus) in net.buses.iter().enumerate() {
        let one_hop = neighbourhood(&adj, i, 1);
        let two_hop = neighbourhood(&adj, i, 2);
        let any = |set: &std::collections::BTreeSet<usize>, f: &dyn Fn(usize) -> bool| {
            if set.iter().any(|&j| f(j)) {
                1.0
            } else {
                0.0
            }
        };
        let is_gen = |j: usize| has_gen[j];
        let is_slack = |j: usize| net.buses[j].bus_type == BusType::Slack;
        let (pd, qd) = loads[i].nominal();
        let v_set = match bus.bus_type {
            BusType::PQ => 0.0,
            _ => bus.v_set.unwrap_or(1.0),
        };
        let mut onehot = [0.0; 3];
        onehot[bus.bus_type.index()] = 1.0;
        out.extend_from_slice(&[
            bus.v_nominal,
            pd,
            qd,
            gen[i].0,
            v_set,
            bus.g_shunt,
            bus.b_shunt,
            gen[i].1,
            gen[i].2,
            bus.v_min,
            bus.v_max,
            net.s_base,
            net.frequency,
            one_hop.len() as f64,
            two_hop.len() as f64,
            distance[i],
            betweenness[i],
            one_hop.iter().map(|&j| net_injection[j]).sum(),
            adjacent_admittance[i],
            any(&one_hop, &is_gen),
            any(&two_hop, &is_gen),
            any(&one_hop, &is_slack),
            any(&two_hop, &is_slack),
        ]);
        out.extend_from_slice(&onehot);
    }
    Ok(out)
}

/// Directed edges with their feature rows and originating branches.
pub fn edge_features(
    net: &Network,
    ybus: &AdmittanceMatrix,
) -> GridResult<(Vec<(usize, usize)>, Vec<Option<usize>>, Vec<f64>)> {
    let mut edges = Vec::new();
    let mut branch = Vec::new();
    let mut feats = Vec::new();
    for (k, br) in net.active_branches() {
        let [_, yft, ytf, _] = br.stamps(k)?;
        let mut kind = [0.0; 4];
        kind[br.kind.index()] = 1.0;
        for ((src, dst), y) in [((br.from, br.to), yft), ((br.to, br.from), ytf)] {
            edges.push((src, dst));
            branch.push(Some(k));
            feats.extend_from_slice(&[y.re, y.im]);
            feats.extend_from_slice(&kind);
            feats.push(br.rating / net.s_base);
        }
    }
    for i in 0..net.n_buses() {
        let y = ybus.diagonal(i);
        edges.push((i, i));
        branch.push(None);
        feats.extend_from_slice(&[y.re, y.im, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
    Ok((edges, branch, feats))
}

pub fn build_graph(base: &Network, scenario: &Scenario, index: usize) -> GridResult<ScenarioGraph> {
    let solution = &scenario.solution;
    let n = base.n_buses();
    if !solution.converged || solution.v_m.len() != n {
        return Err(GridError::UnsolvedScenario);
    }
    let net = scenario.network(base);
    let ybus = assemble_ybus(&net)?;
    let node_features = node_features(&net)?;
    let (edges, edge_branch, edge_features) = edge_features(&net, &ybus)?;
    let bus_types = net.bus_types();
    let targets = (0..n)
        .map(|i| {
            [
                solution.v_m[i],
                solution.delta[i],
                solution.p_g[i],
                solution.q_g[i],
            ]
        })
        .collect();
    Ok(ScenarioGraph {
        system: base.name.clone(),
        index,
        n_nodes: n,
        mask: apply_mask(&bus_types),
        bus_types,
        node_features,
        edges,
        edge_branch,
        edge_features,
        targets,
        ybus,
        loads: net.bus_load_polys(),
    })
}

/// Per-column affine scaling fitted on training graphs.
///
/// One-hot bus-type columns are left untouched; columns without variance keep
/// a unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: [f64; TARGETS],
    pub target_std: [f64; TARGETS],
}

/// Population standard deviation, replaced by 1 for flat columns.
fn spread(sum_sq_dev: f64, count: f64) -> f64 {
    let std = (sum_sq_dev / count).sqrt();
    if std > 0.0 && std.is_finite() {
        std
    } else {
        1.0
    }
}

impl Standardizer {
    pub fn fit<'a>(graphs: impl IntoIterator<Item = &'a ScenarioGraph>) -> GridResult<Standardizer> {
        let graphs: Vec<&ScenarioGraph> = graphs.into_iter().collect();
        let count: usize = graphs.iter().map(|g| g.n_nodes).sum();
        if count == 0 {
            return Err(GridError::EmptyTrainingSet);
        }
        let c = count as f64;
        let mut f_mean = vec![0.0; NODE_FEATURES];
        let mut t_mean = [0.0; TARGETS];
        for g in &graphs {
            for i in 0..g.n_nodes {
                for (m, x) in f_mean.iter_mut().zip(g.node_row(i)) {
                    *m += x;
                }
                for (m, x) in t_mean.iter_mut().zip(&g.targets[i]) {
                    *m += x;
                }
            }
        }
        f_mean.iter_mut().for_each(|m| *m /= c);
        t_mean.iter_mut().for_each(|m| *m /= c);
        let mut f_ss = vec![0.0; NODE_FEATURES];
        let mut t_ss = [0.0; TARGETS];
        for g in &graphs {
            for i in 0..g.n_nodes {
                for ((s, x), m) in f_ss.iter_mut().zip(g.node_row(i)).zip(&f_mean) {
                    *s += (x - m) * (x - m);
                }
                for ((s, x), m) in t_ss.iter_mut().zip(&g.targets[i]).zip(&t_mean) {
                    *s += (x - m) * (x - m);
                }
            }
        }
        let mut feature_std: Vec<f64> = f_ss.iter().map(|&s| spread(s, c)).collect();
        for j in CONTINUOUS_FEATURES..NODE_FEATURES {
            f_mean[j] = 0.0;
            feature_std[j] = 1.0;
        }
        let mut target_std = [1.0; TARGETS];
        for (s, ss) in target_std.iter_mut().zip(t_ss) {
            *s = spread(ss, c);
        }
        Ok(Standardizer {
            feature_mean: f_mean,
            feature_std,
            target_mean: t_mean,
            target_std,
        })
    }

    /// Standardizes a row-major `N × NODE_FEATURES` matrix.
    pub fn transform_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| {
                let j = k % NODE_FEATURES;
                (v - self.feature_mean[j]) / self.feature_std[j]
            })
            .collect()
    }

    pub fn inverse_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(k, v)| {
                let j = k % NODE_FEATURES;
                v * self.feature_std[j] + self.feature_mean[j]
            })
            .collect()
    }

    pub fn transform_target(&self, col: usize, y: f64) -> f64 {
        (y - self.target_mean[col]) / self.target_std[col]
    }

    pub fn inverse_target(&self, col: usize, z: f64) -> f64 {
        z * self.target_std[col] + self.target_mean[col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::*;
    use crate::network::{BranchKind, Load};
    use crate::scenario::{generate_scenarios, RandomizationConfig};
    use crate::solver::{solve_newton_raphson, SolverOptions};
    use std::collections::BTreeSet;

    fn identity_scenario(net: &Network) -> Scenario {
        Scenario {
            base_system: net.name.clone(),
            load_scales: vec![1.0; net.loads.len()],
            gen_scale: 1.0,
            branch_scales: vec![[1.0; 3]; net.branches.len()],
            outages: BTreeSet::new(),
            contingency_class: crate::scenario::ContingencyClass::N0,
            solution: solve_newton_raphson(net, &SolverOptions::default()).unwrap(),
            rng_seed: 0,
            reactive_scaled: true,
        }
    }

    fn case14() -> Network {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/case14.json");
        Network::from_json_file(path).unwrap()
    }

    #[test]
    fn masks_follow_bus_types() {
        assert_eq!(mask_row(BusType::PQ), [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(mask_row(BusType::PV), [0.0, 1.0, 0.0, 1.0]);
        assert_eq!(mask_row(BusType::Slack), [0.0, 0.0, 1.0, 1.0]);
        for t in BusType::ALL {
            assert_eq!(mask_row(t).iter().sum::<f64>(), 2.0);
        }
    }

    #[test]
    fn two_bus_edge_count_and_admittance() {
        let mut net = two_bus(0.0, 0.1);
        net.loads = vec![load(1, 0.2, 0.0)];
        let g = build_graph(&net, &identity_scenario(&net), 0).unwrap();
        assert_eq!(g.n_edges(), 4);
        // Oracle: off-diagonal stamp of a series admittance 1/(j0.1).
        let y = num_complex::Complex64::new(0.0, 0.1).inv();
        let expect = -y;
        for e in 0..2 {
            assert!((g.edge_row(e)[0] - expect.re).abs() < 1e-15);
            assert!((g.edge_row(e)[1] - expect.im).abs() < 1e-12);
            assert!((g.edge_row(e)[1] - 10.0).abs() < 1e-12);
            assert_eq!(&g.edge_row(e)[2..6], &[1.0, 0.0, 0.0, 0.0]);
            assert_eq!(g.edge_row(e)[6], 1.0);
        }
        assert_eq!(g.edges[2], (0, 0));
        assert!((g.edge_row(2)[1] + 10.0).abs() < 1e-12);
        assert_eq!(&g.edge_row(2)[2..], &[0.0; 5]);
    }

    #[test]
    fn star_leaves_flag_slack_neighbour() {
        let net = star(5);
        let f = node_features(&net).unwrap();
        for leaf in 1..=5 {
            let row = &f[leaf * NODE_FEATURES..(leaf + 1) * NODE_FEATURES];
            assert_eq!(row[21], 1.0);
            assert_eq!(row[22], 1.0);
            assert_eq!(row[13], 1.0);
            assert_eq!(row[14], 5.0);
        }
        assert_eq!(f[21], 0.0);
    }

    #[test]
    fn feature_columns_on_ring() {
        let net = ring4();
        let f = node_features(&net).unwrap();
        let row = |i: usize| &f[i * NODE_FEATURES..(i + 1) * NODE_FEATURES];
        // Bus 1 neighbours 0 (slack, no demand) and 3 (PV with setpoint 1.0).
        assert_eq!(row(1)[1], 0.8);
        assert_eq!(row(1)[17], 0.0 + 1.0);
        assert_eq!(row(3)[4], 1.0);
        assert_eq!(row(1)[4], 0.0);
        assert_eq!(row(1)[19], 1.0);
        assert_eq!(&row(3)[23..], &[0.0, 1.0, 0.0]);
        let z01 = (0.01f64 * 0.01 + 0.05 * 0.05).sqrt();
        let z13 = (0.0075f64 * 0.0075 + 0.037 * 0.037).sqrt();
        assert!((row(1)[18] - (1.0 / z01 + 1.0 / z13)).abs() < 1e-9);
        assert!((row(1)[15] - z01).abs() < 1e-15);
    }

    #[test]
    fn graph_invariants_on_generated_scenarios() {
        let net = case14();
        let config = RandomizationConfig {
            seed: 5,
            ..Default::default()
        };
        for (k, s) in generate_scenarios(&net, 20, &config).unwrap().iter().enumerate() {
            let g = build_graph(&net, s, k).unwrap();
            assert_eq!(g.node_features.len(), g.n_nodes * NODE_FEATURES);
            assert_eq!(g.edge_features.len(), g.n_edges() * EDGE_FEATURES);
            let active = net.branches.len() - s.outages.len();
            assert_eq!(g.n_edges(), 2 * active + g.n_nodes);
            for i in 0..g.n_nodes {
                assert!(g.edges.contains(&(i, i)));
                assert_eq!(g.mask[i], mask_row(g.bus_types[i]));
            }
            for (e, &(a, b)) in g.edges.iter().enumerate() {
                if a == b {
                    continue;
                }
                let r = g.edges.iter().position(|&x| x == (b, a)).unwrap();
                assert_eq!(&g.edge_row(e)[2..6], &g.edge_row(r)[2..6]);
            }
            for k in &s.outages {
                assert!(!g.edge_branch.contains(&Some(*k)));
            }
        }
    }

    #[test]
    fn features_ignore_solution() {
        let net = case14();
        let config = RandomizationConfig {
            seed: 8,
            ..Default::default()
        };
        let s = generate_scenarios(&net, 3, &config).unwrap().remove(2);
        let g = build_graph(&net, &s, 0).unwrap();
        let mut zeroed = s.clone();
        let sol = &mut zeroed.solution;
        for v in [&mut sol.v_m, &mut sol.delta, &mut sol.p_g, &mut sol.q_g] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let h = build_graph(&net, &zeroed, 0).unwrap();
        assert_eq!(g.node_features, h.node_features);
        assert_eq!(g.edge_features, h.edge_features);
    }

    #[test]
    fn unsolved_scenario_rejected() {
        let net = ring4();
        let mut s = identity_scenario(&net);
        s.solution.converged = false;
        assert!(matches!(
            build_graph(&net, &s, 0),
            Err(GridError::UnsolvedScenario)
        ));
    }

    #[test]
    fn transformer_edges_carry_kind() {
        let mut net = two_bus(0.0, 0.1);
        net.branches[0].kind = BranchKind::Transformer;
        net.branches[0].tap = 1.05;
        net.loads = vec![Load {
            bus: 1,
            p_d: 0.1,
            q_d: 0.0,
            zip_coeffs: Default::default(),
        }];
        let g = build_graph(&net, &identity_scenario(&net), 0).unwrap();
        let [_, yft, ytf, _] = net.branches[0].stamps(0).unwrap();
        assert_eq!(&g.edge_row(0)[..2], &[yft.re, yft.im]);
        assert_eq!(&g.edge_row(1)[..2], &[ytf.re, ytf.im]);
        assert_eq!(g.edge_row(0)[3], 1.0);
    }

    fn graph_with_rows(rows: &[[f64; NODE_FEATURES]]) -> ScenarioGraph {
        let net = two_bus(0.0, 0.1);
        let mut g = build_graph(&net, &identity_scenario(&net), 0).unwrap();
        g.n_nodes = rows.len();
        g.node_features = rows.iter().flatten().copied().collect();
        g.targets = vec![[1.0, 0.0, 0.0, 0.0]; rows.len()];
        g
    }

    #[test]
    fn standardizer_examples() {
        let mut a = [0.0; NODE_FEATURES];
        let mut b = [0.0; NODE_FEATURES];
        a[0] = 1.0;
        b[0] = 3.0;
        a[5] = 7.0;
        b[5] = 7.0;
        a[24] = 1.0;
        let g = graph_with_rows(&[a, b]);
        let s = Standardizer::fit([&g]).unwrap();
        assert_eq!(s.feature_mean[0], 2.0);
        assert_eq!(s.feature_std[0], 1.0);
        assert_eq!(s.transform_features(&b)[0], 1.0);
        assert_eq!(s.feature_std[5], 1.0);
        assert_eq!(s.transform_features(&b)[5], 0.0);
        assert_eq!(s.feature_mean[24], 0.0);
        assert_eq!(s.feature_std[24], 1.0);
        assert_eq!(s.target_std[0], 1.0);
        assert!(matches!(
            Standardizer::fit(std::iter::empty()),
            Err(GridError::EmptyTrainingSet)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardizer_round_trip(
                rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, NODE_FEATURES), 2..8),
                probe in proptest::collection::vec(-1e3f64..1e3, NODE_FEATURES),
            ) {
                let rows: Vec<[f64; NODE_FEATURES]> =
                    rows.iter().map(|r| r.as_slice().try_into().unwrap()).collect();
                let g = graph_with_rows(&rows);
                let s = Standardizer::fit([&g]).unwrap();
                let back = s.inverse_features(&s.transform_features(&probe));
                for (x, y) in probe.iter().zip(&back) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
                for col in 0..TARGETS {
                    let z = s.transform_target(col, probe[col]);
                    prop_assert!((s.inverse_target(col, z) - probe[col]).abs() <= 1e-12 * probe[col].abs().max(1.0));
                }
            }
        }
    }
}
