//! CSV report rows.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use gridflow_core::features::TARGET_NAMES;
use gridflow_model::metrics::{KnowledgeReport, MetricTable};
use gridflow_model::train::EpochRecord;

pub fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    lr: f64,
    loss_v_m: f64,
    loss_delta: f64,
    loss_p_g: f64,
    loss_q_g: f64,
    loss_physics: f64,
    total: f64,
    sigma_v_m: f64,
    sigma_delta: f64,
    sigma_p_g: f64,
    sigma_q_g: f64,
    sigma_physics: f64,
    penalty: f64,
    val_nmae: f64,
    val_physics: f64,
    phase: u8,
    accepted: bool,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(
        path,
        history.iter().map(|r| {
            let [l0, l1, l2, l3, l4] = r.train.terms;
            let [s0, s1, s2, s3, s4] = r.train.sigma;
            HistoryRow {
                epoch: r.epoch,
                lr: r.lr,
                loss_v_m: l0,
                loss_delta: l1,
                loss_p_g: l2,
                loss_q_g: l3,
                loss_physics: l4,
                total: r.train.total,
                sigma_v_m: s0,
                sigma_delta: s1,
                sigma_p_g: s2,
                sigma_q_g: s3,
                sigma_physics: s4,
                penalty: r.penalty,
                val_nmae: r.val_metric,
                val_physics: r.val_physics,
                phase: r.phase,
                accepted: r.accepted,
            }
        }),
    )
}

#[derive(Serialize)]
struct MetricCsvRow<'a> {
    stage: &'a str,
    system: &'a str,
    task: &'a str,
    count: usize,
    mse: f64,
    rmse: f64,
    mae: f64,
    nmae: Option<f64>,
    r2: Option<f64>,
}

/// Metric tables tagged with a stage label such as `test` or `post`.
pub fn write_metrics(path: &Path, tables: &[(&str, &MetricTable)]) -> Result<()> {
    write_rows(
        path,
        tables.iter().flat_map(|(stage, table)| {
            table.rows.iter().map(move |r| MetricCsvRow {
                stage,
                system: &r.system,
                task: &r.task,
                count: r.metrics.count,
                mse: r.metrics.mse,
                rmse: r.metrics.rmse,
                mae: r.metrics.mae,
                nmae: r.metrics.nmae,
                r2: r.metrics.r2,
            })
        }),
    )
}

/// One row per system and metric with a knowledge-loss column per task, plus
/// the across-system mean.
pub fn write_knowledge(path: &Path, report: &KnowledgeReport) -> Result<()> {
    let mut header = vec!["system".to_string(), "metric".to_string()];
    header.extend(TARGET_NAMES.iter().map(|t| format!("k_{t}")));
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &report.rows {
        let key = (r.system.clone(), r.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows = Vec::new();
    for (system, metric) in &keys {
        let mut row = vec![system.clone(), metric.clone()];
        for task in TARGET_NAMES {
            let k = report
                .rows
                .iter()
                .find(|r| &r.system == system && &r.metric == metric && r.task == task)
                .map(|r| r.k.to_string())
                .unwrap_or_default();
            row.push(k);
        }
        rows.push(row);
    }
    let mut metrics: Vec<&String> = keys.iter().map(|k| &k.1).collect();
    metrics.sort();
    metrics.dedup();
    for metric in metrics {
        let mut row = vec!["mean".to_string(), metric.clone()];
        for task in TARGET_NAMES {
            row.push(report.average(task, metric).map(|k| k.to_string()).unwrap_or_default());
        }
        rows.push(row);
    }
    write_table(path, &header, &rows)
}
