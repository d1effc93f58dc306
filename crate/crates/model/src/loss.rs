//! Masked supervised losses, the power-balance physics loss and the
//! uncertainty-weighted total.

use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use gridflow_core::features::TARGETS;
use gridflow_core::Standardizer;

use crate::batch::Batch;
use crate::error::ModelResult;
use crate::model::{Mode, Model, TASKS};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Stabilizes per-graph normalization when a graph has no supervised entries.
pub const GRAPH_LOSS_EPS: f64 = 1e-8;
pub const TASK_NAMES: [&str; TASKS] = ["v_m", "delta", "p_g", "q_g", "physics"];
pub const PHYSICS: usize = 4;

/// Per-node weights `M_i / (G · (Σ_{j∈g} M_j + ε))` for target column `col`.
pub fn masked_weights(batch: &Batch, col: usize) -> Vec<f64> {
    let g_count = batch.n_graphs() as f64;
    let mut w = vec![0.0; batch.n_nodes()];
    for g in 0..batch.n_graphs() {
        let range = batch.node_range(g);
        let total: f64 = range.clone().map(|i| batch.mask.get(i, col)).sum();
        for i in range {
            w[i] = batch.mask.get(i, col) / (g_count * (total + GRAPH_LOSS_EPS));
        }
    }
    w
}

/// Supervised losses `[V_m, δ, P_g, Q_g]`; the angle term is in squared degrees
/// of the wrapped residual, the others in standardized units.
pub fn supervised_losses(tape: &mut Tape, batch: &Batch, pred: Var, std: &Standardizer) -> [Var; 4] {
    std::array::from_fn(|col| {
        let p = tape.column(pred, col);
        let weights = Rc::new(masked_weights(batch, col));
        let residual = if col == 1 {
            let degrees = tape.affine(p, std.target_std[1], std.target_mean[1]);
            let target = column_tensor(&batch.targets, 1);
            let t = tape.constant(target);
            let d = tape.sub(degrees, t);
            tape.wrap_degrees(d)
        } else {
            let t = tape.constant(column_tensor(&batch.targets_std, col));
            tape.sub(p, t)
        };
        let sq = tape.square(residual);
        tape.dot_const(sq, weights)
    })
}

fn column_tensor(t: &Tensor, col: usize) -> Tensor {
    Tensor::from_vec(t.rows, 1, (0..t.rows).map(|r| t.get(r, col)).collect())
}

struct FixedGradient {
    grad: Tensor,
}

impl CustomOp for FixedGradient {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad.item();
        vec![Some(self.grad.map(|x| s * x))]
    }
}

/// Mean over graphs of the per-node mean squared modulus of the power-balance
/// residual, with gradient with respect to the standardized predictions.
///
/// Voltages come from the predictions at every bus; generation is predicted
/// where the mask marks it unknown and taken from the known values elsewhere.
/// Loads are evaluated at the predicted magnitude.
pub fn physics_value_and_grad(batch: &Batch, pred: &Tensor, std: &Standardizer) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(pred.rows, TARGETS);
    let mut value = 0.0;
    let g_count = batch.n_graphs() as f64;
    let to_rad = PI / 180.0;
    let phys = |i: usize, c: usize| std.inverse_target(c, pred.get(i, c));
    for (g, graph) in batch.graphs.iter().enumerate() {
        let lo = batch.node_offsets[g];
        let n = graph.n;
        if n == 0 {
            continue;
        }
        let w = 1.0 / (g_count * n as f64);
        let vm: Vec<f64> = (0..n).map(|i| phys(lo + i, 0)).collect();
        let theta: Vec<f64> = (0..n).map(|i| phys(lo + i, 1) * to_rad).collect();
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], theta[i])).collect();
        let current = graph.ybus.mul_vec(&v);
        let mut c = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let hybrid = |col: usize| {
                let m = graph.mask.get(i, col);
                m * phys(lo + i, col) + (1.0 - m) * graph.targets.get(i, col)
            };
            let (pd, qd) = graph.loads[i].eval(vm[i]);
            let s = Complex64::new(hybrid(2) - pd, hybrid(3) - qd) - v[i] * current[i].conj();
            value += w * s.norm_sqr();
            c[i] = 2.0 * w * s;
        }
        // A_k = conj(c_k)·conj(I_k) + Σ_i c_i·conj(V_i)·Y_ik
        let mut a: Vec<Complex64> = (0..n).map(|k| c[k].conj() * current[k].conj()).collect();
        for i in 0..n {
            let ci = c[i] * v[i].conj();
            for &(k, y) in graph.ybus.row(i) {
                a[k] += ci * y;
            }
        }
        for k in 0..n {
            let (dp, dq) = graph.loads[k].slope(vm[k]);
            let unit = Complex64::from_polar(1.0, theta[k]);
            let d_vm = -(a[k] * unit).re - (c[k].re * dp + c[k].im * dq);
            let d_theta = (a[k] * v[k]).im;
            let row = lo + k;
            grad.set(row, 0, d_vm * std.target_std[0]);
            grad.set(row, 1, d_theta * std.target_std[1] * to_rad);
            grad.set(row, 2, graph.mask.get(k, 2) * c[k].re * std.target_std[2]);
            grad.set(row, 3, graph.mask.get(k, 3) * c[k].im * std.target_std[3]);
        }
    }
    (value, grad)
}

pub fn physics_loss(tape: &mut Tape, batch: &Batch, pred: Var, std: &Standardizer) -> Var {
    let (value, grad) = physics_value_and_grad(batch, tape.value(pred), std);
    tape.custom(&[pred], Tensor::scalar(value), Box::new(FixedGradient { grad }))
}

/// `Σ L_τ/(2σ_τ²) + log σ_τ` with `log σ` a `1 × 5` row, or the plain sum when
/// `weighted` is false.
pub fn uncertainty_total(tape: &mut Tape, losses: &[Var; TASKS], log_sigma: Var, weighted: bool) -> Var {
    let row = tape.concat_cols(losses);
    if !weighted {
        return tape.sum(row);
    }
    let s2 = tape.scale(log_sigma, -2.0);
    let precision = tape.exp(s2);
    let scaled = tape.mul(row, precision);
    let scaled = tape.scale(scaled, 0.5);
    let data = tape.sum(scaled);
    let reg = tape.sum(log_sigma);
    tape.add(data, reg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Raw losses `[V_m, δ, P_g, Q_g, physics]`.
    pub terms: [f64; TASKS],
    pub total: f64,
    pub sigma: [f64; TASKS],
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.iter().all(|x| x.is_finite())
    }
}

/// Loss nodes of one forward pass.
pub struct LossGraph {
    pub terms: [Var; TASKS],
    pub total: Var,
    pub pred: Var,
    pub attention: Var,
}

/// Forward pass plus all five losses and the combined objective.
pub fn build_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &Batch,
    std: &Standardizer,
    mode: Mode,
    weighted: bool,
) -> ModelResult<LossGraph> {
    let x = tape.constant(batch.features.clone());
    let out = model.forward(tape, batch, x, mode)?;
    let [v, d, p, q] = supervised_losses(tape, batch, out.pred, std);
    let phy = physics_loss(tape, batch, out.pred, std);
    let terms = [v, d, p, q, phy];
    let log_sigma = tape.param(&model.params, model.log_sigma_id());
    let total = uncertainty_total(tape, &terms, log_sigma, weighted);
    Ok(LossGraph {
        terms,
        total,
        pred: out.pred,
        attention: out.attention,
    })
}

pub fn breakdown(tape: &Tape, graph: &LossGraph, model: &Model) -> LossBreakdown {
    LossBreakdown {
        terms: graph.terms.map(|v| tape.value(v).item()),
        total: tape.value(graph.total).item(),
        sigma: model.log_sigma().map(f64::exp),
    }
}
