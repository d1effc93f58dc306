//! Graph layers built on the tape: per-graph normalization, edge-aware GATv2
//! attention and inverted dropout.

use std::rc::Rc;

use rand::Rng;

use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

pub const GRAPH_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

struct GraphNormOp {
    offsets: Vec<usize>,
    /// Shifted inputs `h − α·μ`, same shape as the input.
    shifted: Tensor,
    /// Per graph and channel standard deviation, `G × C`.
    sigma: Tensor,
}

impl CustomOp for GraphNormOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (h, alpha, gamma) = (inputs[0], inputs[1], inputs[2]);
        let c = h.cols;
        let mut gh = Tensor::zeros(h.rows, c);
        let mut ga = Tensor::zeros(1, c);
        let mut gg = Tensor::zeros(1, c);
        let mut gb = Tensor::zeros(1, c);
        for g in 0..self.offsets.len() - 1 {
            let (lo, hi) = (self.offsets[g], self.offsets[g + 1]);
            let n = (hi - lo) as f64;
            if hi == lo {
                continue;
            }
            for j in 0..c {
                let sd = self.sigma.get(g, j);
                let mut dot = 0.0;
                let mut mean_h = 0.0;
                for i in lo..hi {
                    let s_hat = self.shifted.get(i, j) / sd;
                    let go = grad.get(i, j);
                    gb.data[j] += go;
                    gg.data[j] += go * s_hat;
                    dot += go * gamma.data[j] * s_hat;
                    mean_h += h.get(i, j);
                }
                dot /= n;
                mean_h /= n;
                let mut sum_gs = 0.0;
                for i in lo..hi {
                    let s_hat = self.shifted.get(i, j) / sd;
                    let gs = (grad.get(i, j) * gamma.data[j] - s_hat * dot) / sd;
                    gh.set(i, j, gs);
                    sum_gs += gs;
                }
                for i in lo..hi {
                    gh.data[i * c + j] -= alpha.data[j] * sum_gs / n;
                }
                ga.data[j] -= mean_h * sum_gs;
            }
        }
        vec![Some(gh), Some(ga), Some(gg), Some(gb)]
    }
}

/// Normalizes each channel within each graph: `γ·(h − α·μ)/σ + β` where
/// `σ² = mean((h − α·μ)²) + ε`. Graph `g` owns rows `offsets[g]..offsets[g+1]`.
pub fn graph_norm(
    tape: &mut Tape,
    h: Var,
    alpha: Var,
    gamma: Var,
    beta: Var,
    offsets: &[usize],
) -> Var {
    let vh = tape.value(h);
    let (va, vg, vb) = (tape.value(alpha), tape.value(gamma), tape.value(beta));
    let c = vh.cols;
    let n_graphs = offsets.len() - 1;
    let mut shifted = Tensor::zeros(vh.rows, c);
    let mut sigma = Tensor::filled(n_graphs, c, 1.0);
    let mut out = Tensor::zeros(vh.rows, c);
    for g in 0..n_graphs {
        let (lo, hi) = (offsets[g], offsets[g + 1]);
        if hi == lo {
            continue;
        }
        let n = (hi - lo) as f64;
        for j in 0..c {
            let mean = (lo..hi).map(|i| vh.get(i, j)).sum::<f64>() / n;
            let mut var = 0.0;
            for i in lo..hi {
                let s = vh.get(i, j) - va.data[j] * mean;
                shifted.set(i, j, s);
                var += s * s;
            }
            let sd = (var / n + GRAPH_NORM_EPS).sqrt();
            sigma.set(g, j, sd);
            for i in lo..hi {
                out.set(i, j, vg.data[j] * shifted.get(i, j) / sd + vb.data[j]);
            }
        }
    }
    let op = GraphNormOp {
        offsets: offsets.to_vec(),
        shifted,
        sigma,
    };
    tape.custom(&[h, alpha, gamma, beta], out, Box::new(op))
}

/// Weights of one edge-aware GATv2 layer. Projections have `heads · head_dim` columns.
#[derive(Debug, Clone, Copy)]
pub struct GatVars {
    pub w_source: Var,
    pub w_target: Var,
    pub w_edge: Var,
    pub attention: Var,
}

/// Returns per-head messages (`N × heads·head_dim`) and attention (`E × heads`).
///
/// Scores for edge `j → i` are `aᵀ LeakyReLU(W_t h_i + W_s h_j + W_e e_ij)`,
/// normalized over the in-edges of `i`; messages are `Σ α_ij W_s h_j`.
pub fn gatv2(
    tape: &mut Tape,
    h: Var,
    edge_features: Var,
    src: &Rc<Vec<usize>>,
    dst: &Rc<Vec<usize>>,
    vars: &GatVars,
    heads: usize,
) -> (Var, Var) {
    let n = tape.value(h).rows;
    let xs = tape.matmul(h, vars.w_source);
    let xt = tape.matmul(h, vars.w_target);
    let xe = tape.matmul(edge_features, vars.w_edge);
    let xs_e = tape.gather_rows(xs, src.clone());
    let xt_e = tape.gather_rows(xt, dst.clone());
    let z = tape.add(xt_e, xs_e);
    let z = tape.add(z, xe);
    let z = tape.leaky_relu(z, LEAKY_SLOPE);
    let score = tape.head_dot(z, vars.attention, heads);
    let alpha = tape.segment_softmax(score, dst.clone(), n);
    let weighted = tape.head_scale(xs_e, alpha, heads);
    let messages = tape.scatter_rows(weighted, dst.clone(), n);
    (messages, alpha)
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales the rest.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let len = tape.value(x).len();
    let mask: Vec<f64> = (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, Rc::new(mask))
}
