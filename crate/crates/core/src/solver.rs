//! Newton-Raphson AC power flow in polar coordinates.
//!
//! Unknowns are the angles of all non-slack buses and the magnitudes of PQ
//! buses. Generators hold their voltage setpoints without reactive limits.
//! Angles are carried in radians internally and reported in degrees.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, GridResult};
use crate::network::{assemble_ybus, validate_network, AdmittanceMatrix, BusType, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub flat_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 30,
            flat_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_m: Vec<f64>,
    /// Bus angles in degrees.
    pub delta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Infinity-norm mismatch before each Newton step (and at the final state).
    #[serde(default)]
    pub mismatch_history: Vec<f64>,
}

impl PowerFlowSolution {
    pub fn state(&self) -> InjectionState {
        InjectionState {
            v_m: self.v_m.clone(),
            angle: self.delta.iter().map(|d| d.to_radians()).collect(),
            p_g: self.p_g.clone(),
            q_g: self.q_g.clone(),
        }
    }
}

/// Bus voltages (angles in radians) together with the generation they are checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionState {
    pub v_m: Vec<f64>,
    pub angle: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
}

/// Complex power drawn into the network at every bus, `S = V (Y V)*`.
pub fn calculated_injections(y: &AdmittanceMatrix, v_m: &[f64], angle: &[f64]) -> Vec<Complex64> {
    let v: Vec<Complex64> = v_m
        .iter()
        .zip(angle)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect();
    let current = y.mul_vec(&v);
    v.iter().zip(&current).map(|(v, i)| v * i.conj()).collect()
}

/// Per-bus `(ΔP, ΔQ)`: scheduled net injection minus the injection implied by the voltages.
pub fn compute_injection_mismatch(
    net: &Network,
    y: &AdmittanceMatrix,
    state: &InjectionState,
) -> Vec<(f64, f64)> {
    let loads = net.bus_load_polys();
    let s = calculated_injections(y, &state.v_m, &state.angle);
    (0..net.n_buses())
        .map(|i| {
            let (pd, qd) = loads[i].eval(state.v_m[i]);
            (
                state.p_g[i] - pd - s[i].re,
                state.q_g[i] - qd - s[i].im,
            )
        })
        .collect()
}

pub fn max_abs_mismatch(mismatch: &[(f64, f64)]) -> f64 {
    mismatch
        .iter()
        .fold(0.0f64, |m, &(p, q)| m.max(p.abs()).max(q.abs()))
}

pub fn solve_newton_raphson(net: &Network, options: &SolverOptions) -> GridResult<PowerFlowSolution> {
    if options.tolerance <= 0.0 || options.max_iterations == 0 {
        return Err(GridError::InvalidConfig(
            "solver tolerance must be positive and max_iterations at least 1".into(),
        ));
    }
    let violations = validate_network(net);
    if !violations.is_empty() {
        return Err(GridError::InvalidNetwork(violations));
    }
    let y = assemble_ybus(net)?;
    let n = net.n_buses();
    let types = net.bus_types();
    let loads = net.bus_load_polys();
    let gen = net.bus_generation();

    let pvpq: Vec<usize> = (0..n).filter(|&i| types[i] != BusType::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| types[i] == BusType::PQ).collect();
    let mut angle_col = vec![usize::MAX; n];
    for (c, &i) in pvpq.iter().enumerate() {
        angle_col[i] = c;
    }
    let mut vm_col = vec![usize::MAX; n];
    for (c, &i) in pq.iter().enumerate() {
        vm_col[i] = pvpq.len() + c;
    }
    let dim = pvpq.len() + pq.len();

    let mut vm: Vec<f64> = net.buses.iter().map(|b| b.v_start()).collect();
    let p_sched: Vec<f64> = gen.iter().map(|g| g.0).collect();
    let mut angle = if options.flat_start {
        vec![0.0; n]
    } else {
        dc_angles(&y, &pvpq, &angle_col, &p_sched, &loads)
    };

    let residual = |vm: &[f64], s: &[Complex64]| -> DVector<f64> {
        let mut f = DVector::zeros(dim);
        for &i in &pvpq {
            let (pd, _) = loads[i].eval(vm[i]);
            f[angle_col[i]] = p_sched[i] - pd - s[i].re;
        }
        for &i in &pq {
            let (_, qd) = loads[i].eval(vm[i]);
            f[vm_col[i]] = -qd - s[i].im;
        }
        f
    };

    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let s = calculated_injections(&y, &vm, &angle);
        let f = residual(&vm, &s);
        let norm = f.amax();
        history.push(norm);
        if !norm.is_finite() {
            return Err(GridError::NotConverged {
                iterations,
                mismatch: norm,
            });
        }
        if norm <= options.tolerance {
            break;
        }
        if iterations >= options.max_iterations {
            return Err(GridError::NotConverged {
                iterations,
                mismatch: norm,
            });
        }

        // d(calculated + load)/dx; the Newton step is J⁻¹ f.
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for &i in &pvpq {
            let p_row = angle_col[i];
            let q_row = vm_col[i];
            for &(k, yik) in y.row(i) {
                let (g, b) = (yik.re, yik.im);
                if k == i {
                    let (p, q) = (s[i].re, s[i].im);
                    let v = vm[i];
                    jac[(p_row, angle_col[i])] += -q - b * v * v;
                    if q_row != usize::MAX {
                        let (dpd, dqd) = loads[i].slope(v);
                        jac[(p_row, q_row)] += p / v + g * v + dpd;
                        jac[(q_row, angle_col[i])] += p - g * v * v;
                        jac[(q_row, q_row)] += q / v - b * v + dqd;
                    }
                    continue;
                }
                let t = angle[i] - angle[k];
                let (sin, cos) = t.sin_cos();
                let gc_bs = g * cos + b * sin;
                let gs_bc = g * sin - b * cos;
                if types[k] != BusType::Slack {
                    jac[(p_row, angle_col[k])] += vm[i] * vm[k] * gs_bc;
                    if q_row != usize::MAX {
                        jac[(q_row, angle_col[k])] += -vm[i] * vm[k] * gc_bs;
                    }
                }
                if vm_col[k] != usize::MAX {
                    jac[(p_row, vm_col[k])] += vm[i] * gc_bs;
                    if q_row != usize::MAX {
                        jac[(q_row, vm_col[k])] += vm[i] * gs_bc;
                    }
                }
            }
        }

        let step = jac
            .lu()
            .solve(&f)
            .ok_or(GridError::SingularJacobian {
                iteration: iterations,
            })?;
        if step.iter().any(|x| !x.is_finite()) {
            return Err(GridError::SingularJacobian {
                iteration: iterations,
            });
        }
        for &i in &pvpq {
            angle[i] += step[angle_col[i]];
        }
        for &i in &pq {
            vm[i] += step[vm_col[i]];
        }
        iterations += 1;
    }

    let s = calculated_injections(&y, &vm, &angle);
    let mut p_g = p_sched.clone();
    let mut q_g = vec![0.0; n];
    for i in 0..n {
        let (pd, qd) = loads[i].eval(vm[i]);
        match types[i] {
            BusType::Slack => {
                p_g[i] = s[i].re + pd;
                q_g[i] = s[i].im + qd;
            }
            BusType::PV => q_g[i] = s[i].im + qd,
            BusType::PQ => {}
        }
    }
    let reference = net.slack_bus().map(|k| angle[k]).unwrap_or(0.0);
    let delta = angle.iter().map(|a| (a - reference).to_degrees()).collect();
    let max_mismatch = *history.last().unwrap_or(&0.0);

    Ok(PowerFlowSolution {
        v_m: vm,
        delta,
        p_g,
        q_g,
        converged: true,
        iterations,
        max_mismatch,
        mismatch_history: history,
    })
}

/// Linearized angle estimate `B' θ = P` used when not starting flat.
fn dc_angles(
    y: &AdmittanceMatrix,
    pvpq: &[usize],
    col: &[usize],
    p_sched: &[f64],
    loads: &[crate::network::LoadPoly],
) -> Vec<f64> {
    let m = pvpq.len();
    let mut b = DMatrix::<f64>::zeros(m, m);
    let mut p = DVector::<f64>::zeros(m);
    for (r, &i) in pvpq.iter().enumerate() {
        p[r] = p_sched[i] - loads[i].nominal().0;
        for &(k, yik) in y.row(i) {
            if k != i {
                b[(r, r)] += yik.im;
                if col[k] != usize::MAX {
                    b[(r, col[k])] -= yik.im;
                }
            }
        }
    }
    let mut angle = vec![0.0; y.n()];
    if let Some(theta) = b.lu().solve(&p) {
        if theta.iter().all(|t| t.is_finite()) {
            for (r, &i) in pvpq.iter().enumerate() {
                angle[i] = theta[r];
            }
        }
    }
    angle
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub s_from: Complex64,
    pub s_to: Complex64,
}

impl BranchFlow {
    pub fn losses(&self) -> Complex64 {
        self.s_from + self.s_to
    }
}

/// From- and to-end complex power of every branch; out-of-service branches carry zero.
pub fn branch_flows(net: &Network, solution: &PowerFlowSolution) -> GridResult<Vec<BranchFlow>> {
    let v: Vec<Complex64> = solution
        .v_m
        .iter()
        .zip(&solution.delta)
        .map(|(&m, &d)| Complex64::from_polar(m, d.to_radians()))
        .collect();
    net.branches
        .iter()
        .enumerate()
        .map(|(k, br)| {
            if !br.in_service {
                let zero = Complex64::new(0.0, 0.0);
                return Ok(BranchFlow {
                    s_from: zero,
                    s_to: zero,
                });
            }
            let [ff, ft, tf, tt] = br.stamps(k)?;
            let (vf, vt) = (v[br.from], v[br.to]);
            let i_f = ff * vf + ft * vt;
            let i_t = tf * vf + tt * vt;
            Ok(BranchFlow {
                s_from: vf * i_f.conj(),
                s_to: vt * i_t.conj(),
            })
        })
        .collect()
}

/// Splits per-bus generation across co-located units.
///
/// Reactive output is shared in proportion to each unit's `q_max - q_min`
/// range (equally when all ranges are zero). Active output keeps `p_set` for
/// non-slack units; the slack bus remainder goes to its slack units.
pub fn generator_dispatch(net: &Network, solution: &PowerFlowSolution) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = net.generators.iter().map(|g| (g.p_set, 0.0)).collect();
    for bus in 0..net.n_buses() {
        let units: Vec<usize> = (0..net.generators.len())
            .filter(|&k| net.generators[k].bus == bus)
            .collect();
        if units.is_empty() {
            continue;
        }
        let ranges: Vec<f64> = units
            .iter()
            .map(|&k| (net.generators[k].q_max - net.generators[k].q_min).max(0.0))
            .collect();
        let total_range: f64 = ranges.iter().sum();
        for (j, &k) in units.iter().enumerate() {
            let share = if total_range > 0.0 {
                ranges[j] / total_range
            } else {
                1.0 / units.len() as f64
            };
            out[k].1 = solution.q_g[bus] * share;
        }
        if net.buses[bus].bus_type == BusType::Slack {
            let mut slack_units: Vec<usize> = units
                .iter()
                .copied()
                .filter(|&k| net.generators[k].is_slack_unit)
                .collect();
            if slack_units.is_empty() {
                slack_units = units.clone();
            }
            let fixed: f64 = units
                .iter()
                .filter(|k| !slack_units.contains(k))
                .map(|&k| net.generators[k].p_set)
                .sum();
            let each = (solution.p_g[bus] - fixed) / slack_units.len() as f64;
            for k in slack_units {
                out[k].0 = each;
            }
        }
    }
    out
}
