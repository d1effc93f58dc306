//! Post-hoc analyses: attention-based branch importance, its correlation with
//! branch parameters, integrated-gradients feature attribution and importance
//! quantiles.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use gridflow_core::features::{NODE_FEATURES, TARGETS, TARGET_NAMES};
use gridflow_core::network::{BranchKind, Network};

use crate::batch::{Batch, PreparedGraph};
use crate::error::{ModelError, ModelResult};
use crate::model::{Mode, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Final-layer attention (`E × heads`) of one graph.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub graph: Arc<PreparedGraph>,
    pub attention: Tensor,
}

pub fn attention_records(
    model: &Model,
    graphs: &[Arc<PreparedGraph>],
    batch_size: usize,
) -> ModelResult<Vec<AttentionRecord>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk.to_vec());
        let (_, att) = model.predict(&batch)?;
        for (g, graph) in chunk.iter().enumerate() {
            let range = batch.edge_range(g);
            let rows: Vec<f64> = range.flat_map(|e| att.row(e).to_vec()).collect();
            out.push(AttentionRecord {
                graph: graph.clone(),
                attention: Tensor::from_vec(graph.n_edges(), att.cols, rows),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScore {
    pub system: String,
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    /// Mean of the two directed scores.
    pub score: f64,
    /// Scenarios in which the branch was in service.
    pub scenarios: usize,
}

/// Head- and scenario-averaged attention per directed branch edge, merged over
/// the two directions. Self-loops are not branches and are skipped.
pub fn branch_importance(records: &[AttentionRecord]) -> Vec<BranchScore> {
    // (system, branch) -> [(sum, count) for forward, backward], endpoints, scenarios
    type Acc = ([(f64, usize); 2], (usize, usize), usize);
    let mut acc: BTreeMap<(String, usize), Acc> = BTreeMap::new();
    for rec in records {
        let g = &rec.graph;
        let heads = rec.attention.cols as f64;
        let mut seen = Vec::new();
        for e in 0..g.n_edges() {
            let Some(branch) = g.edge_branch[e] else { continue };
            let (s, d) = (g.src[e], g.dst[e]);
            let mean = rec.attention.row(e).iter().sum::<f64>() / heads;
            let entry = acc
                .entry((g.system.clone(), branch))
                .or_insert(([(0.0, 0); 2], (s.min(d), s.max(d)), 0));
            let dir = usize::from(s > d);
            entry.0[dir].0 += mean;
            entry.0[dir].1 += 1;
            if !seen.contains(&branch) {
                seen.push(branch);
                entry.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|((system, branch), (dirs, (from, to), scenarios))| {
            let directed: Vec<f64> = dirs
                .iter()
                .filter(|(_, c)| *c > 0)
                .map(|(s, c)| s / *c as f64)
                .collect();
            BranchScore {
                system,
                branch,
                from,
                to,
                score: directed.iter().sum::<f64>() / directed.len() as f64,
                scenarios,
            }
        })
        .collect()
}

pub const BRANCH_FEATURES: [&str; 4] = ["conductance", "susceptance", "rating", "transformer"];

/// `[r/|z|², x/|z|², rating, is_transformer]` of a base-network branch.
pub fn branch_descriptors(net: &Network, branch: usize) -> [f64; 4] {
    let b = &net.branches[branch];
    let z2 = b.r * b.r + b.x * b.x;
    let transformer = matches!(b.kind, BranchKind::Transformer);
    [b.r / z2, b.x / z2, b.rating, if transformer { 1.0 } else { 0.0 }]
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let degenerate = |ss: f64, m: f64| ss <= n * (1e-12 * m.abs().max(1.0)).powi(2);
    if degenerate(sxx, mx) || degenerate(syy, my) {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn zscore(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    (sd > 1e-12 * m.abs().max(1.0)).then(|| x.iter().map(|v| (v - m) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub system: String,
    pub feature: String,
    /// Absent when either variable is constant within the system.
    pub r: Option<f64>,
    pub branches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub feature: String,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    /// Equal-weight mean of the defined per-system correlations.
    pub mean_r: Vec<(String, Option<f64>)>,
    /// Standardized coefficients of the joint regression.
    pub beta_std: Vec<Coefficient>,
    pub notes: Vec<String>,
}

/// One system's branches: descriptors and scores.
pub struct SystemBranches {
    pub system: String,
    pub descriptors: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

/// Per-system Pearson correlations between branch scores and descriptors, their
/// equal-weight mean, and a least-squares fit of the scores on all descriptors
/// after z-scoring every variable within its system.
pub fn importance_correlations(systems: &[SystemBranches]) -> CorrelationReport {
    let mut report = CorrelationReport::default();
    let mut sums = [(0.0, 0usize); 4];
    let mut design: Vec<[f64; 4]> = Vec::new();
    let mut response: Vec<f64> = Vec::new();
    for sys in systems {
        let cols: Vec<Vec<f64>> = (0..4).map(|f| sys.descriptors.iter().map(|d| d[f]).collect()).collect();
        for (f, col) in cols.iter().enumerate() {
            let r = pearson(col, &sys.scores);
            if r.is_none() {
                report.notes.push(format!(
                    "{}: {} correlation undefined (constant values or too few branches)",
                    sys.system, BRANCH_FEATURES[f]
                ));
            }
            if let Some(r) = r {
                sums[f].0 += r;
                sums[f].1 += 1;
            }
            report.rows.push(CorrelationRow {
                system: sys.system.clone(),
                feature: BRANCH_FEATURES[f].into(),
                r,
                branches: col.len(),
            });
        }
        let Some(y) = zscore(&sys.scores) else {
            report
                .notes
                .push(format!("{}: constant scores, left out of the regression", sys.system));
            continue;
        };
        let zcols: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| zscore(c).unwrap_or_else(|| vec![0.0; c.len()]))
            .collect();
        for i in 0..y.len() {
            design.push(std::array::from_fn(|f| zcols[f][i]));
            response.push(y[i]);
        }
    }
    report.mean_r = (0..4)
        .map(|f| {
            let (s, c) = sums[f];
            (BRANCH_FEATURES[f].to_string(), (c > 0).then(|| s / c as f64))
        })
        .collect();
    let active: Vec<usize> = (0..4)
        .filter(|&f| design.iter().any(|row| row[f] != 0.0))
        .collect();
    let mut betas = [None; 4];
    if !active.is_empty() && design.len() > active.len() {
        let x = DMatrix::from_fn(design.len(), active.len(), |i, j| design[i][active[j]]);
        let y = DVector::from_vec(response);
        if let Ok(beta) = x.clone().svd(true, true).solve(&y, 1e-12) {
            for (j, &f) in active.iter().enumerate() {
                betas[f] = Some(beta[j]);
            }
        }
    } else {
        report.notes.push("not enough branches for the joint regression".into());
    }
    report.beta_std = (0..4)
        .map(|f| Coefficient {
            feature: BRANCH_FEATURES[f].into(),
            beta: betas[f],
        })
        .collect();
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub median: f64,
    pub frac_low: f64,
    pub frac_high: f64,
    pub count: usize,
}

pub const LOW_IMPORTANCE: f64 = 0.1;
pub const HIGH_IMPORTANCE: f64 = 0.9;

/// Median and the fractions of scores at or below 0.1 and at or above 0.9.
pub fn importance_distribution(scores: &[f64]) -> Option<ImportanceSummary> {
    if scores.is_empty() {
        return None;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    Some(ImportanceSummary {
        median,
        frac_low: s.iter().filter(|&&x| x <= LOW_IMPORTANCE).count() as f64 / n as f64,
        frac_high: s.iter().filter(|&&x| x >= HIGH_IMPORTANCE).count() as f64 / n as f64,
        count: n,
    })
}

/// Per-system mean input graph: for every bus, its standardized feature row
/// averaged over all scenarios of that system in `graphs`.
pub fn mean_baselines(graphs: &[Arc<PreparedGraph>]) -> BTreeMap<String, Tensor> {
    let mut acc: BTreeMap<String, (Tensor, usize)> = BTreeMap::new();
    for g in graphs {
        let entry = acc
            .entry(g.system.clone())
            .or_insert_with(|| (Tensor::zeros(g.n, NODE_FEATURES), 0));
        for (s, x) in entry.0.data.iter_mut().zip(&g.features.data) {
            *s += x;
        }
        entry.1 += 1;
    }
    acc.into_iter()
        .map(|(system, (mut sum, count))| {
            sum.data.iter_mut().for_each(|v| *v /= count as f64);
            (system, sum)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// Per node and feature, `N × NODE_FEATURES`.
    pub values: Tensor,
    pub output: f64,
    pub baseline_output: f64,
}

impl Attribution {
    /// `|Σ IG − (F(x) − F(x̄))|`.
    pub fn completeness_residual(&self) -> f64 {
        (self.values.sum() - (self.output - self.baseline_output)).abs()
    }
}

/// The scalar explained for a task: mean head output over buses where that
/// task is unknown.
fn output_weights(graph: &PreparedGraph, task: usize) -> Rc<Vec<f64>> {
    let count: f64 = (0..graph.n).map(|i| graph.mask.get(i, task)).sum();
    let mut w = vec![0.0; graph.n * TARGETS];
    if count > 0.0 {
        for i in 0..graph.n {
            w[i * TARGETS + task] = graph.mask.get(i, task) / count;
        }
    }
    Rc::new(w)
}

fn output_and_gradient(model: &Model, batch: &Batch, x: Tensor, weights: &Rc<Vec<f64>>) -> ModelResult<(f64, Tensor)> {
    let mut tape = Tape::new();
    let input = tape.input(x);
    let out = model.forward(&mut tape, batch, input, Mode::Eval)?;
    let f = tape.dot_const(out.pred, weights.clone());
    let grads = tape.backward(f);
    let g = grads.get(input).cloned().expect("input gradient");
    Ok((tape.value(f).item(), g))
}

/// Integrated gradients along the straight path from the baseline row to the
/// graph's features with a right Riemann sum of `steps` points.
pub fn integrated_gradients(
    model: &Model,
    graph: &Arc<PreparedGraph>,
    baseline: &Tensor,
    task: usize,
    steps: usize,
) -> ModelResult<Attribution> {
    let batch = Batch::single(graph.clone());
    let weights = output_weights(graph, task);
    let x = &graph.features;
    if baseline.shape() != x.shape() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{}x{} baseline", x.rows, x.cols),
            found: format!("{}x{}", baseline.rows, baseline.cols),
        });
    }
    let base = baseline;
    let mut avg = Tensor::zeros(x.rows, x.cols);
    let mut output = 0.0;
    let steps = steps.max(1);
    for k in 1..=steps {
        let t = k as f64 / steps as f64;
        let point = base.zip_map(x, |b, v| b + t * (v - b));
        let (f, g) = output_and_gradient(model, &batch, point, &weights)?;
        if k == steps {
            output = f;
        }
        for (a, v) in avg.data.iter_mut().zip(&g.data) {
            *a += v / steps as f64;
        }
    }
    let (baseline_output, _) = output_and_gradient(model, &batch, base.clone(), &weights)?;
    let values = Tensor::from_vec(
        x.rows,
        x.cols,
        avg.data
            .iter()
            .zip(x.data.iter().zip(&base.data))
            .map(|(g, (v, b))| g * (v - b))
            .collect(),
    );
    Ok(Attribution {
        values,
        output,
        baseline_output,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSensitivity {
    pub system: String,
    pub task: String,
    /// Normalized sensitivity per node feature, summing to one.
    pub shares: Vec<f64>,
    /// Largest relative completeness residual seen.
    pub max_relative_residual: f64,
}

/// Per-system, per-task normalized mean absolute attributions.
pub fn feature_sensitivity(
    model: &Model,
    graphs: &[Arc<PreparedGraph>],
    baselines: &BTreeMap<String, Tensor>,
    steps: usize,
) -> ModelResult<Vec<FeatureSensitivity>> {
    let mut acc: BTreeMap<(String, usize), (Vec<f64>, usize, f64)> = BTreeMap::new();
    for g in graphs {
        let baseline = baselines.get(&g.system).ok_or_else(|| ModelError::KeyMismatch(format!("no baseline for {}", g.system)))?;
        for task in 0..TARGETS {
            let a = integrated_gradients(model, g, baseline, task, steps)?;
            let delta = (a.output - a.baseline_output).abs();
            let rel = if delta > 0.0 { a.completeness_residual() / delta } else { 0.0 };
            let entry = acc
                .entry((g.system.clone(), task))
                .or_insert((vec![0.0; NODE_FEATURES], 0, 0.0));
            for f in 0..NODE_FEATURES {
                let mean_abs = (0..g.n).map(|i| a.values.get(i, f).abs()).sum::<f64>() / g.n as f64;
                entry.0[f] += mean_abs;
            }
            entry.1 += 1;
            entry.2 = entry.2.max(rel);
        }
    }
    Ok(acc
        .into_iter()
        .map(|((system, task), (sums, _, residual))| {
            let total: f64 = sums.iter().sum();
            let shares = if total > 0.0 {
                sums.iter().map(|s| s / total).collect()
            } else {
                vec![1.0 / NODE_FEATURES as f64; NODE_FEATURES]
            };
            FeatureSensitivity {
                system,
                task: TARGET_NAMES[task].into(),
                shares,
                max_relative_residual: residual,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::testutil::{case, prepared};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                hidden_dim: 8,
                layers: 2,
                heads: 2,
                trunk_width: 8,
                ..Default::default()
            },
            2,
        )
        .unwrap()
    }

    fn record(graph: &Arc<PreparedGraph>, att: Vec<f64>, heads: usize) -> AttentionRecord {
        AttentionRecord {
            graph: graph.clone(),
            attention: Tensor::from_vec(graph.n_edges(), heads, att),
        }
    }

    #[test]
    fn uniform_attention_scores_one_third() {
        let (graphs, _) = prepared("case4gs", 40, 1);
        // With every branch in service each bus of case4gs has two neighbours.
        let g = graphs.iter().find(|g| g.n_edges() == 12).unwrap();
        let att = vec![1.0 / 3.0; g.n_edges()];
        let scores = branch_importance(&[record(g, att, 1)]);
        assert_eq!(scores.len(), 4);
        for s in scores {
            assert!((s.score - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_average_over_scenarios_and_directions() {
        let (graphs, _) = prepared("case4gs", 2, 1);
        let g = &graphs[0];
        let e0 = (0..g.n_edges()).find(|&e| g.edge_branch[e] == Some(0)).unwrap();
        let make = |v: f64| {
            let mut att = vec![0.5; g.n_edges()];
            att[e0] = v;
            record(g, att, 1)
        };
        let scores = branch_importance(&[make(0.2), make(0.4)]);
        let s0 = scores.iter().find(|s| s.branch == 0).unwrap();
        // Directed means 0.3 and 0.5.
        assert!((s0.score - 0.4).abs() < 1e-15);
        assert_eq!(s0.scenarios, 2);
    }

    #[test]
    fn importance_matches_replay_of_records() {
        let (graphs, _) = prepared("case9", 12, 4);
        let model = tiny();
        let records = attention_records(&model, &graphs, 5).unwrap();
        let scores = branch_importance(&records);
        for s in &scores {
            let mut directed = [(0.0, 0); 2];
            for r in &records {
                let g = &r.graph;
                for e in 0..g.n_edges() {
                    if g.edge_branch[e] == Some(s.branch) {
                        let heads = r.attention.row(e);
                        let m = heads.iter().sum::<f64>() / heads.len() as f64;
                        let d = usize::from(g.src[e] != s.from);
                        directed[d].0 += m;
                        directed[d].1 += 1;
                    }
                }
            }
            let expected = 0.5 * (directed[0].0 / directed[0].1 as f64 + directed[1].0 / directed[1].1 as f64);
            assert!((s.score - expected).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&s.score));
        }
        for r in &records {
            for node in 0..r.graph.n {
                for h in 0..r.attention.cols {
                    let total: f64 = (0..r.graph.n_edges())
                        .filter(|&e| r.graph.dst[e] == node)
                        .map(|e| r.attention.get(e, h))
                        .sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_column_gives_unit_correlation() {
        let sus = vec![1.0, 4.0, 2.0, 8.0, 5.0];
        let sys = SystemBranches {
            system: "s".into(),
            descriptors: sus.iter().map(|&b| [1.0, b, 100.0, 0.0]).collect(),
            scores: sus.iter().map(|b| 0.1 * b + 0.3).collect(),
        };
        let report = importance_correlations(&[sys]);
        let r = report.rows.iter().find(|r| r.feature == "susceptance").unwrap().r.unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let rating = report.rows.iter().find(|r| r.feature == "rating").unwrap();
        assert_eq!(rating.r, None);
        assert!(report.notes.iter().any(|n| n.contains("rating")));
    }

    #[test]
    fn regression_recovers_standardized_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 4000;
        let normal = |rng: &mut ChaCha8Rng| {
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let descriptors: Vec<[f64; 4]> = (0..n)
            .map(|_| [normal(&mut rng).abs(), normal(&mut rng), 100.0 + normal(&mut rng), f64::from(rng.gen_bool(0.3))])
            .collect();
        let sus: Vec<f64> = descriptors.iter().map(|d| d[1]).collect();
        let z = zscore(&sus).unwrap();
        // Noise variance 0.75 keeps the score at unit variance, so its
        // standardized slope on z(susceptance) is 0.5.
        let scores: Vec<f64> = z.iter().map(|v| 0.5 * v + 0.75f64.sqrt() * normal(&mut rng)).collect();
        let report = importance_correlations(&[SystemBranches {
            system: "s".into(),
            descriptors,
            scores,
        }]);
        let beta = report.beta_std[1].beta.unwrap();
        let se = (0.75f64 / n as f64).sqrt();
        assert!((beta - 0.5).abs() < 4.0 * se + 0.02, "{beta}");
        for c in [0, 2, 3] {
            assert!(report.beta_std[c].beta.unwrap().abs() < 4.0 * se + 0.02);
        }
    }

    #[test]
    fn distribution_examples() {
        let s = importance_distribution(&[0.5; 7]).unwrap();
        assert_eq!((s.median, s.frac_low, s.frac_high), (0.5, 0.0, 0.0));
        let s = importance_distribution(&[0.05, 0.95]).unwrap();
        assert_eq!((s.frac_low, s.frac_high), (0.5, 0.5));
        assert!(importance_distribution(&[]).is_none());
    }

    proptest! {
        #[test]
        fn distribution_matches_sorting_oracle(v in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            let s = importance_distribution(&v).unwrap();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
            prop_assert_eq!(s.median, med);
            let low = sorted.iter().take_while(|&&x| x <= 0.1).count();
            let high = n - sorted.iter().take_while(|&&x| x < 0.9).count();
            prop_assert_eq!(s.frac_low, low as f64 / n as f64);
            prop_assert_eq!(s.frac_high, high as f64 / n as f64);
        }
    }

    #[test]
    fn attributions_vanish_at_baseline() {
        let (graphs, _) = prepared("case9", 1, 1);
        let g = graphs[0].clone();
        let model = tiny();
        let a = integrated_gradients(&model, &g, &g.features, 0, 8).unwrap();
        assert!(a.values.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_model_attribution_is_exact() {
        // Zero messages leave input -> trunk -> output; a large trunk bias keeps
        // the ELU in its identity region, so the map is affine in the input.
        let (graphs, _) = prepared("case9", 1, 1);
        let g = graphs[0].clone();
        let mut model = tiny();
        for (id, p) in model.params.clone().iter() {
            if p.name.starts_with("layer") && (p.name.ends_with("w_head") || p.name.ends_with("w_source")) {
                model.params.value_mut(id).data.fill(0.0);
            }
        }
        let tb = model.params.find("trunk.bias").unwrap();
        model.params.value_mut(tb).data.fill(50.0);
        let baselines = mean_baselines(&graphs);
        let baseline = &baselines["case9"];
        let w = output_weights(&g, 0);
        let batch = Batch::single(g.clone());
        let (_, grad) = output_and_gradient(&model, &batch, g.features.clone(), &w).unwrap();
        for steps in [1, 3, 16] {
            let a = integrated_gradients(&model, &g, baseline, 0, steps).unwrap();
            for k in 0..a.values.len() {
                let expected = grad.data[k] * (g.features.data[k] - baseline.data[k]);
                assert!((a.values.data[k] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn completeness_and_normalized_shares() {
        let (graphs, _) = prepared("case14", 3, 2);
        let model = tiny();
        let baselines = mean_baselines(&graphs);
        let a = integrated_gradients(&model, &graphs[0], &baselines["case14"], 1, 256).unwrap();
        let delta = (a.output - a.baseline_output).abs();
        assert!(a.completeness_residual() < 1e-3 * delta, "{} vs {}", a.completeness_residual(), delta);
        let shares = feature_sensitivity(&model, &graphs[..1], &baselines, 16).unwrap();
        assert_eq!(shares.len(), 4);
        for s in shares {
            assert!((s.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.shares.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn descriptors_of_case_branches() {
        let net = case("case9");
        let d = branch_descriptors(&net, 0);
        let b = &net.branches[0];
        let z2 = b.r * b.r + b.x * b.x;
        assert_eq!(d[1], b.x / z2);
    }
}
