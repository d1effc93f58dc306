//! Per-unit electrical network model and bus-admittance assembly.
//!
//! Every electrical quantity is expressed on the network's `s_base`; no unit
//! conversion happens inside the core. Bus ids are contiguous `0..N`.

use std::collections::BTreeSet;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, GridResult};

/// Reactance used for switch branches so that `Y` stays finite.
pub const SWITCH_REACTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BusType {
    PQ,
    PV,
    Slack,
}

impl BusType {
    pub const ALL: [BusType; 3] = [BusType::PQ, BusType::PV, BusType::Slack];

    pub fn index(self) -> usize {
        match self {
            BusType::PQ => 0,
            BusType::PV => 1,
            BusType::Slack => 2,
        }
    }
}

impl fmt::Display for BusType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BusType::PQ => "PQ",
            BusType::PV => "PV",
            BusType::Slack => "Slack",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    pub bus_type: BusType,
    /// Nominal voltage in kV.
    pub v_nominal: f64,
    /// Voltage magnitude setpoint (PV and Slack buses).
    #[serde(default)]
    pub v_set: Option<f64>,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default)]
    pub g_shunt: f64,
    #[serde(default)]
    pub b_shunt: f64,
}

impl Bus {
    /// Setpoint for controlled buses, 1.0 otherwise.
    pub fn v_start(&self) -> f64 {
        match self.bus_type {
            BusType::PQ => 1.0,
            _ => self.v_set.unwrap_or(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BranchKind {
    #[default]
    Line,
    Transformer,
    Impedance,
    Switch,
}

impl BranchKind {
    pub const ALL: [BranchKind; 4] = [
        BranchKind::Line,
        BranchKind::Transformer,
        BranchKind::Impedance,
        BranchKind::Switch,
    ];

    pub fn index(self) -> usize {
        match self {
            BranchKind::Line => 0,
            BranchKind::Transformer => 1,
            BranchKind::Impedance => 2,
            BranchKind::Switch => 3,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_charging: f64,
    /// Off-nominal turns ratio on the from side.
    #[serde(default = "one")]
    pub tap: f64,
    /// Phase shift in degrees.
    #[serde(default)]
    pub shift: f64,
    /// Thermal rating in MVA.
    #[serde(default)]
    pub rating: f64,
    #[serde(default)]
    pub kind: BranchKind,
    #[serde(default = "yes")]
    pub in_service: bool,
}

impl Branch {
    /// Series impedance actually stamped into `Y` (switches get a fixed small reactance).
    pub fn effective_impedance(&self) -> Complex64 {
        match self.kind {
            BranchKind::Switch => Complex64::new(0.0, SWITCH_REACTANCE),
            _ => Complex64::new(self.r, self.x),
        }
    }

    /// The four π-model stamps `(Y_ff, Y_ft, Y_tf, Y_tt)`.
    pub fn stamps(&self, index: usize) -> GridResult<[Complex64; 4]> {
        let z = self.effective_impedance();
        if z.norm() == 0.0 {
            return Err(GridError::ZeroImpedanceBranch { branch: index });
        }
        let y = z.inv();
        let charging = Complex64::new(0.0, self.b_charging / 2.0);
        let shift = self.shift.to_radians();
        let t = Complex64::from_polar(self.tap, shift);
        let yff = (y + charging) / (self.tap * self.tap);
        let yft = -y / t.conj();
        let ytf = -y / t;
        let ytt = y + charging;
        Ok([yff, yft, ytf, ytt])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: usize,
    pub p_set: f64,
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default)]
    pub is_slack_unit: bool,
}

/// ZIP split `(z, i, p)` for active and reactive demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipCoeffs {
    pub p: [f64; 3],
    pub q: [f64; 3],
}

impl Default for ZipCoeffs {
    fn default() -> Self {
        Self {
            p: [0.0, 0.0, 1.0],
            q: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub bus: usize,
    pub p_d: f64,
    pub q_d: f64,
    #[serde(default)]
    pub zip_coeffs: ZipCoeffs,
}

/// Voltage-dependent demand at one bus: `P(V) = p[0] V² + p[1] V + p[2]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadPoly {
    pub p: [f64; 3],
    pub q: [f64; 3],
}

impl LoadPoly {
    pub fn eval(&self, vm: f64) -> (f64, f64) {
        (
            self.p[0] * vm * vm + self.p[1] * vm + self.p[2],
            self.q[0] * vm * vm + self.q[1] * vm + self.q[2],
        )
    }

    /// Derivatives `(dP/dV, dQ/dV)`.
    pub fn slope(&self, vm: f64) -> (f64, f64) {
        (
            2.0 * self.p[0] * vm + self.p[1],
            2.0 * self.q[0] * vm + self.q[1],
        )
    }

    /// Demand at nominal voltage.
    pub fn nominal(&self) -> (f64, f64) {
        (self.p.iter().sum(), self.q.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "s_base_mva")]
    pub s_base: f64,
    #[serde(rename = "frequency_hz")]
    pub frequency: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub loads: Vec<Load>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingSlack,
    DuplicateSlack { buses: Vec<usize> },
    NonContiguousIds { position: usize, id: usize },
    InvalidVoltageLimits { bus: usize },
    MissingSetpoint { bus: usize },
    DanglingBranch { branch: usize },
    SelfLoopBranch { branch: usize },
    ZeroReactance { branch: usize },
    NonPositiveTap { branch: usize },
    DanglingGenerator { generator: usize },
    InvalidReactiveLimits { generator: usize },
    MissingGenerator { bus: usize },
    DanglingLoad { load: usize },
    InvalidZip { load: usize },
    Islanded { components: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl Network {
    /// Reads a JSON case file.
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> GridResult<Network> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_bus(&self) -> Option<usize> {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
    }

    pub fn bus_types(&self) -> Vec<BusType> {
        self.buses.iter().map(|b| b.bus_type).collect()
    }

    /// Aggregated ZIP demand per bus.
    pub fn bus_load_polys(&self) -> Vec<LoadPoly> {
        let mut out = vec![LoadPoly::default(); self.n_buses()];
        for load in &self.loads {
            let poly = &mut out[load.bus];
            for k in 0..3 {
                poly.p[k] += load.p_d * load.zip_coeffs.p[k];
                poly.q[k] += load.q_d * load.zip_coeffs.q[k];
            }
        }
        out
    }

    /// Per-bus sums of `(p_set, q_min, q_max)` and generator presence.
    pub fn bus_generation(&self) -> Vec<(f64, f64, f64)> {
        let mut out = vec![(0.0, 0.0, 0.0); self.n_buses()];
        for g in &self.generators {
            let e = &mut out[g.bus];
            e.0 += g.p_set;
            e.1 += g.q_min;
            e.2 += g.q_max;
        }
        out
    }

    pub fn has_generator(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_buses()];
        for g in &self.generators {
            out[g.bus] = true;
        }
        out
    }

    /// In-service branch indices.
    pub fn active_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.in_service)
    }

    /// Copy with the given branches taken out of service.
    pub fn with_outages(&self, outages: &BTreeSet<usize>) -> Network {
        let mut net = self.clone();
        for &k in outages {
            if let Some(b) = net.branches.get_mut(k) {
                b.in_service = false;
            }
        }
        net
    }
}

pub fn validate_network(net: &Network) -> Vec<Violation> {
    let n = net.n_buses();
    let mut out = Vec::new();

    let slacks: Vec<usize> = net
        .buses
        .iter()
        .filter(|b| b.bus_type == BusType::Slack)
        .map(|b| b.id)
        .collect();
    match slacks.len() {
        0 => out.push(Violation::MissingSlack),
        1 => {}
        _ => out.push(Violation::DuplicateSlack { buses: slacks }),
    }

    for (pos, bus) in net.buses.iter().enumerate() {
        if bus.id != pos {
            out.push(Violation::NonContiguousIds { position: pos, id: bus.id });
        }
        if !(bus.v_min < bus.v_max) {
            out.push(Violation::InvalidVoltageLimits { bus: pos });
        }
        if bus.bus_type != BusType::PQ && bus.v_set.is_none() {
            out.push(Violation::MissingSetpoint { bus: pos });
        }
    }

    for (k, br) in net.branches.iter().enumerate() {
        if br.from >= n || br.to >= n {
            out.push(Violation::DanglingBranch { branch: k });
            continue;
        }
        if br.from == br.to {
            out.push(Violation::SelfLoopBranch { branch: k });
        }
        if br.x == 0.0 && br.kind != BranchKind::Switch {
            out.push(Violation::ZeroReactance { branch: k });
        }
        if !(br.tap > 0.0) {
            out.push(Violation::NonPositiveTap { branch: k });
        }
    }

    let mut hosted = vec![false; n];
    for (k, g) in net.generators.iter().enumerate() {
        if g.bus >= n {
            out.push(Violation::DanglingGenerator { generator: k });
            continue;
        }
        hosted[g.bus] = true;
        if g.q_min > g.q_max {
            out.push(Violation::InvalidReactiveLimits { generator: k });
        }
    }
    for (pos, bus) in net.buses.iter().enumerate() {
        if bus.bus_type != BusType::PQ && !hosted[pos] {
            out.push(Violation::MissingGenerator { bus: pos });
        }
    }

    for (k, load) in net.loads.iter().enumerate() {
        if load.bus >= n {
            out.push(Violation::DanglingLoad { load: k });
        }
        let zp: f64 = load.zip_coeffs.p.iter().sum();
        let zq: f64 = load.zip_coeffs.q.iter().sum();
        if (zp - 1.0).abs() > 1e-12 || (zq - 1.0).abs() > 1e-12 {
            out.push(Violation::InvalidZip { load: k });
        }
    }

    let dangling = out
        .iter()
        .any(|v| matches!(v, Violation::DanglingBranch { .. }));
    if n > 0 && !dangling {
        let comps = connected_components(net, &BTreeSet::new());
        if comps.len() > 1 {
            out.push(Violation::Islanded { components: comps.len() });
        }
    }
    out
}

/// Sparse complex bus-admittance matrix, one sorted row per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmittanceMatrix {
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl AdmittanceMatrix {
    pub fn from_rows(rows: Vec<Vec<(usize, Complex64)>>) -> Self {
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, k: usize) -> Complex64 {
        match self.rows[i].binary_search_by_key(&k, |e| e.0) {
            Ok(pos) => self.rows[i][pos].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn diagonal(&self, i: usize) -> Complex64 {
        self.get(i, i)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Iterator over `(row, col, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(k, y)| (i, k, y)))
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let n = self.n();
        let mut out = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for (i, k, y) in self.entries() {
            out[i][k] = y;
        }
        out
    }

    /// Bus current injections `I = Y V`.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(k, y)| y * v[k]).sum())
            .collect()
    }
}

pub fn assemble_ybus(net: &Network) -> GridResult<AdmittanceMatrix> {
    let n = net.n_buses();
    let mut rows: Vec<Vec<(usize, Complex64)>> = (0..n)
        .map(|i| {
            let bus = &net.buses[i];
            vec![(i, Complex64::new(bus.g_shunt, bus.b_shunt))]
        })
        .collect();

    for (k, br) in net.active_branches() {
        let [yff, yft, ytf, ytt] = br.stamps(k)?;
        let (f, t) = (br.from, br.to);
        add_entry(&mut rows[f], f, yff);
        add_entry(&mut rows[f], t, yft);
        add_entry(&mut rows[t], f, ytf);
        add_entry(&mut rows[t], t, ytt);
    }
    Ok(AdmittanceMatrix { rows })
}

fn add_entry(row: &mut Vec<(usize, Complex64)>, col: usize, y: Complex64) {
    match row.binary_search_by_key(&col, |e| e.0) {
        Ok(pos) => row[pos].1 += y,
        Err(pos) => row.insert(pos, (col, y)),
    }
}

/// Adjacency lists over in-service, non-outaged branches: `(neighbor, branch)`.
pub fn adjacency(net: &Network, outages: &BTreeSet<usize>) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); net.n_buses()];
    for (k, br) in net.active_branches() {
        if outages.contains(&k) {
            continue;
        }
        adj[br.from].push((br.to, k));
        adj[br.to].push((br.from, k));
    }
    adj
}

/// Buses grouped by connectivity; components are sorted and ordered by their smallest bus.
pub fn connected_components(net: &Network, outages: &BTreeSet<usize>) -> Vec<Vec<usize>> {
    let n = net.n_buses();
    let adj = adjacency(net, outages);
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    stack.push(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn is_connected(net: &Network, outages: &BTreeSet<usize>) -> bool {
    net.n_buses() == 0 || connected_components(net, outages).len() == 1
}
