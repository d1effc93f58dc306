//! Error metrics over unknown (masked) state variables and knowledge loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use gridflow_core::features::{TARGETS, TARGET_NAMES};
use gridflow_core::Standardizer;

use crate::batch::{Batch, PreparedGraph};
use crate::error::{ModelError, ModelResult};
use crate::loss::physics_value_and_grad;
use crate::model::Model;
use crate::tape::wrap_degrees;
use crate::tensor::Tensor;

pub const POOLED: &str = "pooled";
pub const ANGLE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// MAE over the target range, in percent; absent for a zero range.
    pub nmae: Option<f64>,
    /// Absent when the targets have no spread.
    pub r2: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub system: String,
    pub task: String,
    pub metrics: TaskMetrics,
}

/// Rows per (system, task) plus pooled rows over all systems.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, system: &str, task: &str) -> Option<&TaskMetrics> {
        self.rows
            .iter()
            .find(|r| r.system == system && r.task == task)
            .map(|r| &r.metrics)
    }

    pub fn systems(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.system != POOLED)
            .map(|r| r.system.clone())
            .collect();
        s.dedup();
        s
    }

    /// Mean NMAE over the four tasks on the pooled rows (missing values skipped).
    pub fn mean_nmae(&self) -> f64 {
        let vals: Vec<f64> = TARGET_NAMES
            .iter()
            .filter_map(|t| self.get(POOLED, t).and_then(|m| m.nmae))
            .collect();
        if vals.is_empty() {
            return f64::INFINITY;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Collects masked (prediction, target) pairs.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    pairs: BTreeMap<String, [Vec<(f64, f64)>; TARGETS]>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one graph's physical-unit predictions; unmasked entries are ignored.
    pub fn add(&mut self, system: &str, pred: &Tensor, target: &Tensor, mask: &Tensor) {
        let entry = self.pairs.entry(system.to_string()).or_default();
        for i in 0..pred.rows {
            for (c, pairs) in entry.iter_mut().enumerate() {
                if mask.get(i, c) != 0.0 {
                    pairs.push((pred.get(i, c), target.get(i, c)));
                }
            }
        }
    }

    pub fn finish(&self) -> MetricTable {
        let mut rows = Vec::new();
        let mut pooled: [Vec<(f64, f64)>; TARGETS] = Default::default();
        for (system, per_task) in &self.pairs {
            for c in 0..TARGETS {
                pooled[c].extend_from_slice(&per_task[c]);
                if let Some(m) = task_metrics(&per_task[c], c == ANGLE) {
                    rows.push(MetricRow {
                        system: system.clone(),
                        task: TARGET_NAMES[c].into(),
                        metrics: m,
                    });
                }
            }
        }
        for c in 0..TARGETS {
            if let Some(m) = task_metrics(&pooled[c], c == ANGLE) {
                rows.push(MetricRow {
                    system: POOLED.into(),
                    task: TARGET_NAMES[c].into(),
                    metrics: m,
                });
            }
        }
        MetricTable { rows }
    }
}

/// Circular mean of angles in degrees.
pub fn circular_mean_degrees(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0.0), |(s, c), d: f64| {
        let r = d.to_radians();
        (s + r.sin(), c + r.cos())
    });
    s.atan2(c).to_degrees()
}

pub fn task_metrics(pairs: &[(f64, f64)], angle: bool) -> Option<TaskMetrics> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let residual = |p: f64, t: f64| if angle { wrap_degrees(p - t) } else { p - t };
    let mse = pairs.iter().map(|&(p, t)| residual(p, t).powi(2)).sum::<f64>() / n;
    let mae = pairs.iter().map(|&(p, t)| residual(p, t).abs()).sum::<f64>() / n;
    let (lo, hi) = pairs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, t)| (lo.min(t), hi.max(t)));
    let range = hi - lo;
    let nmae = (range > 0.0).then(|| 100.0 * mae / range);
    let ss_tot: f64 = if angle {
        let centre = circular_mean_degrees(pairs.iter().map(|p| p.1));
        pairs.iter().map(|&(_, t)| wrap_degrees(t - centre).powi(2)).sum()
    } else {
        let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        pairs.iter().map(|&(_, t)| (t - mean).powi(2)).sum()
    };
    let r2 = (ss_tot > 0.0).then(|| 1.0 - mse * n / ss_tot);
    Some(TaskMetrics {
        mse,
        rmse: mse.sqrt(),
        mae,
        nmae,
        r2,
        count: pairs.len(),
    })
}

fn physical_rows(pred: &Tensor, range: std::ops::Range<usize>, std: &Standardizer) -> Tensor {
    let mut t = Tensor::zeros(range.len(), TARGETS);
    for (row, i) in range.enumerate() {
        for c in 0..TARGETS {
            t.set(row, c, std.inverse_target(c, pred.get(i, c)));
        }
    }
    t
}

/// Evaluation-mode predictions in physical units for each graph.
pub fn predict_physical(
    model: &Model,
    graphs: &[Arc<PreparedGraph>],
    std: &Standardizer,
    batch_size: usize,
) -> ModelResult<Vec<Tensor>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk.to_vec());
        let (pred, _) = model.predict(&batch)?;
        for g in 0..batch.n_graphs() {
            out.push(physical_rows(&pred, batch.node_range(g), std));
        }
    }
    Ok(out)
}

pub struct Evaluation {
    pub table: MetricTable,
    /// Mean physics loss over the evaluated batches.
    pub physics: f64,
}

pub fn evaluate(
    model: &Model,
    graphs: &[Arc<PreparedGraph>],
    std: &Standardizer,
    batch_size: usize,
) -> ModelResult<Evaluation> {
    let mut acc = MetricAccumulator::new();
    let mut physics = 0.0;
    let mut batches = 0usize;
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk.to_vec());
        let (pred, _) = model.predict(&batch)?;
        physics += physics_value_and_grad(&batch, &pred, std).0;
        batches += 1;
        for (g, graph) in chunk.iter().enumerate() {
            let t = physical_rows(&pred, batch.node_range(g), std);
            acc.add(&graph.system, &t, &graph.targets, &graph.mask);
        }
    }
    Ok(Evaluation {
        table: acc.finish(),
        physics: if batches == 0 { 0.0 } else { physics / batches as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRow {
    pub system: String,
    pub task: String,
    pub metric: String,
    pub pre: f64,
    pub post: f64,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeAverage {
    pub task: String,
    pub metric: String,
    pub k_mean: f64,
    pub systems: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub rows: Vec<KnowledgeRow>,
    pub averages: Vec<KnowledgeAverage>,
}

impl KnowledgeReport {
    pub fn average(&self, task: &str, metric: &str) -> Option<f64> {
        self.averages
            .iter()
            .find(|a| a.task == task && a.metric == metric)
            .map(|a| a.k_mean)
    }
}

/// `K = post − pre` per system, task and metric (NMAE, MAE), and the mean over systems.
pub fn knowledge_loss(pre: &MetricTable, post: &MetricTable, systems: &[String]) -> ModelResult<KnowledgeReport> {
    let mut rows = Vec::new();
    for system in systems {
        for task in TARGET_NAMES {
            let (a, b) = match (pre.get(system, task), post.get(system, task)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(ModelError::KeyMismatch(format!(
                        "{system}/{task} missing from one of the tables"
                    )))
                }
            };
            if let (Some(x), Some(y)) = (a.nmae, b.nmae) {
                rows.push(KnowledgeRow {
                    system: system.clone(),
                    task: task.into(),
                    metric: "nmae".into(),
                    pre: x,
                    post: y,
                    k: y - x,
                });
            }
            rows.push(KnowledgeRow {
                system: system.clone(),
                task: task.into(),
                metric: "mae".into(),
                pre: a.mae,
                post: b.mae,
                k: b.mae - a.mae,
            });
        }
    }
    let averages = knowledge_averages(&rows);
    Ok(KnowledgeReport { rows, averages })
}

/// Mean knowledge loss over systems per task and metric.
pub fn knowledge_averages(rows: &[KnowledgeRow]) -> Vec<KnowledgeAverage> {
    let mut averages = Vec::new();
    for task in TARGET_NAMES {
        for metric in ["nmae", "mae"] {
            let ks: Vec<f64> = rows
                .iter()
                .filter(|r| r.task == task && r.metric == metric)
                .map(|r| r.k)
                .collect();
            if !ks.is_empty() {
                averages.push(KnowledgeAverage {
                    task: task.into(),
                    metric: metric.into(),
                    k_mean: ks.iter().sum::<f64>() / ks.len() as f64,
                    systems: ks.len(),
                });
            }
        }
    }
    averages
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_column(values: &[(f64, f64)], col: usize) -> (Tensor, Tensor, Tensor) {
        let n = values.len();
        let mut p = Tensor::zeros(n, 4);
        let mut t = Tensor::zeros(n, 4);
        let mut m = Tensor::zeros(n, 4);
        for (i, &(a, b)) in values.iter().enumerate() {
            p.set(i, col, a);
            t.set(i, col, b);
            m.set(i, col, 1.0);
        }
        (p, t, m)
    }

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, i as f64)).collect();
        for angle in [false, true] {
            let m = task_metrics(&pairs, angle).unwrap();
            assert_eq!(m.mae, 0.0);
            assert_eq!(m.r2, Some(1.0));
        }
    }

    #[test]
    fn nmae_is_percent_of_range() {
        let pairs: Vec<(f64, f64)> = (0..=10).map(|i| (i as f64 + 0.5, i as f64)).collect();
        let m = task_metrics(&pairs, false).unwrap();
        assert!((m.nmae.unwrap() - 5.0).abs() < 1e-12);
        assert!((m.rmse - m.mse.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn angle_errors_wrap() {
        let m = task_metrics(&[(179.0, -179.0), (-179.0, 179.0)], true).unwrap();
        assert!((m.mae - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_range_has_no_nmae() {
        let m = task_metrics(&[(1.0, 2.0), (3.0, 2.0)], false).unwrap();
        assert_eq!(m.nmae, None);
        assert_eq!(m.r2, None);
    }

    #[test]
    fn knowledge_loss_sign_and_value() {
        let mk = |nmae_vm: f64| {
            let mut acc = MetricAccumulator::new();
            for c in 0..4 {
                let base: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64, i as f64)).collect();
                let shifted: Vec<(f64, f64)> = base.iter().map(|&(p, t)| (p + if c == 0 { nmae_vm } else { 0.0 }, t)).collect();
                let (p, t, m) = single_column(&shifted, c);
                acc.add("a", &p, &t, &m);
            }
            acc.finish()
        };
        let pre = mk(0.26);
        let post = mk(12.26);
        let report = knowledge_loss(&pre, &post, &["a".to_string()]).unwrap();
        assert!((report.average("v_m", "nmae").unwrap() - 12.0).abs() < 1e-9);
        let back = knowledge_loss(&post, &pre, &["a".to_string()]).unwrap();
        assert!(back.average("v_m", "nmae").unwrap() < 0.0);
        let same = knowledge_loss(&pre, &pre, &["a".to_string()]).unwrap();
        assert!(same.rows.iter().all(|r| r.k == 0.0));
        for r in &report.rows {
            assert_eq!(r.k, r.post - r.pre);
        }
        assert!(matches!(
            knowledge_loss(&pre, &post, &["b".to_string()]),
            Err(ModelError::KeyMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn masked_out_slots_never_matter(
            vals in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 2..30),
            garbage in -1e6f64..1e6,
        ) {
            let n = vals.len();
            let mut p = Tensor::zeros(n, 4);
            let mut t = Tensor::zeros(n, 4);
            let mut m = Tensor::zeros(n, 4);
            for (i, &(a, b, on)) in vals.iter().enumerate() {
                for c in 0..4 {
                    p.set(i, c, a);
                    t.set(i, c, b);
                    m.set(i, c, if on { 1.0 } else { 0.0 });
                }
            }
            let mut acc = MetricAccumulator::new();
            acc.add("s", &p, &t, &m);
            let mut q = p.clone();
            for i in 0..n {
                for c in 0..4 {
                    if m.get(i, c) == 0.0 {
                        q.set(i, c, garbage);
                    }
                }
            }
            let mut acc2 = MetricAccumulator::new();
            acc2.add("s", &q, &t, &m);
            prop_assert_eq!(acc.finish(), acc2.finish());
        }

        #[test]
        fn wrapped_angle_mae_bounded(
            vals in proptest::collection::vec((-720.0f64..720.0, -180.0f64..180.0), 1..40),
        ) {
            let m = task_metrics(&vals, true).unwrap();
            prop_assert!(m.mae <= 180.0 + 1e-9);
        }
    }
}
