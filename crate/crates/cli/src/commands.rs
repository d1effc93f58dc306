//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use gridflow_core::dataset::verify_labels;
use gridflow_core::features::{NODE_FEATURE_NAMES, TARGET_NAMES};
use gridflow_core::{generate_dataset, save_dataset, Network, RandomizationConfig};
use gridflow_model::checkpoint::Checkpoint;
use gridflow_model::continual::{adapt, AdaptConfig, AdaptData};
use gridflow_model::interp::{
    attention_records, branch_descriptors, branch_importance, feature_sensitivity, importance_correlations,
    importance_distribution, mean_baselines, SystemBranches,
};
use gridflow_model::metrics::{evaluate, predict_physical};
use gridflow_model::train::train_model;
use gridflow_model::{Model, PreparedGraph};

use crate::args::{AdaptArgs, Command, EvaluateArgs, ExplainArgs, GenerateArgs, SplitArg, TrainArgs, VerifyArgs};
use crate::config::{self, ensure_parent, sibling, write_toml, TrainRun};
use crate::data::{fit_standardizer, load_all, networks, prepare, systems};
use crate::plot;
use crate::report::{write_history, write_knowledge, write_metrics, write_rows, write_table};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Explain(a) => explain(a),
        Command::Verify(a) => verify(a),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg: RandomizationConfig = config::load(args.config.as_deref())?;
    cfg.seed = config::resolve_seed(args.seed, cfg.seed)?;
    if let Some(k) = args.max_outages {
        cfg.max_outages = k.into();
    }
    let net = Network::from_json_file(&args.case).with_context(|| format!("loading {}", args.case.display()))?;
    info!("generating {} scenarios of {} (seed {})", args.n, net.name, cfg.seed);
    let dataset = generate_dataset(&net, args.n, &cfg)?;
    ensure_parent(&args.out)?;
    save_dataset(&dataset, &args.out)?;
    write_toml(&sibling(&args.out, "config.toml"), &cfg)?;
    info!("wrote {}", args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut run: TrainRun = config::load(args.config.as_deref())?;
    run.train.seed = config::resolve_seed(None, run.train.seed)?;
    let datasets = load_all(&args.data)?;
    let std = fit_standardizer(&datasets)?;
    let train_graphs = prepare(&datasets, SplitArg::Train, &std);
    let val = prepare(&datasets, SplitArg::Val, &std);
    let test = prepare(&datasets, SplitArg::Test, &std);
    info!(
        "training on {} graphs from {} system(s), {} validation, {} test",
        train_graphs.len(),
        datasets.len(),
        val.len(),
        test.len()
    );
    let mut model = Model::new(run.model.clone(), run.train.seed)?;
    let report = train_model(&mut model, &train_graphs, &val, &std, &run.train)?;
    ensure_parent(&args.out)?;
    Checkpoint::new(&model, &std, systems(&datasets), &run.train).save(&args.out)?;
    write_history(&sibling(&args.out, "history.csv"), &report.history)?;
    let e = evaluate(&model, &test, &std, run.train.eval_batch_size)?;
    write_metrics(&sibling(&args.out, "metrics.csv"), &[("test", &e.table)])?;
    write_toml(&sibling(&args.out, "config.toml"), &run)?;
    info!(
        "best epoch {:?}; test mean NMAE {:.4}%",
        report.best_epoch,
        e.table.mean_nmae()
    );
    Ok(())
}

#[derive(Serialize)]
struct PhysicsRow {
    split: SplitArg,
    graphs: usize,
    physics_loss: f64,
}

fn load_checkpoint(path: &std::path::Path) -> Result<(Checkpoint, Model)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&args.ckpt)?;
    let datasets = load_all(&args.data)?;
    let graphs = prepare(&datasets, args.split, &ckpt.standardizer);
    if graphs.is_empty() {
        bail!("no scenarios in the selected split");
    }
    fs::create_dir_all(&args.report)?;
    let e = evaluate(&model, &graphs, &ckpt.standardizer, args.batch_size)?;
    write_metrics(&args.report.join("metrics.csv"), &[(split_name(args.split), &e.table)])?;
    write_rows(
        &args.report.join("physics.csv"),
        [PhysicsRow {
            split: args.split,
            graphs: graphs.len(),
            physics_loss: e.physics,
        }],
    )?;
    let preds = predict_physical(&model, &graphs, &ckpt.standardizer, args.batch_size)?;
    for (task, name) in TARGET_NAMES.iter().enumerate() {
        let mut points = Vec::new();
        for (g, p) in graphs.iter().zip(&preds) {
            for i in 0..g.n {
                if g.mask.get(i, task) > 0.0 {
                    points.push((g.targets.get(i, task), p.get(i, task)));
                }
            }
        }
        plot::parity(&points, &args.report.join(format!("parity_{name}.png")))?;
    }
    write_toml(&args.report.join("config.toml"), &args)?;
    info!("mean NMAE {:.4}% over {} graphs", e.table.mean_nmae(), graphs.len());
    Ok(())
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

fn adapt_cmd(args: AdaptArgs) -> Result<()> {
    let mut cfg: AdaptConfig = config::load(args.config.as_deref())?;
    cfg.train.seed = config::resolve_seed(None, cfg.train.seed)?;
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(r) = args.replay_ratio {
        cfg.replay_ratio = r;
    }
    let (ckpt, mut model) = load_checkpoint(&args.ckpt)?;
    let std = &ckpt.standardizer;
    let new = load_all(std::slice::from_ref(&args.new_data))?;
    let base = load_all(&args.replay_data)?;
    if base.iter().any(|d| d.system() == new[0].system()) {
        bail!("system {} appears in both the new and the replay data", new[0].system());
    }
    let new_train = prepare(&new, SplitArg::Train, std);
    let new_val = prepare(&new, SplitArg::Val, std);
    let new_eval = prepare(&new, SplitArg::Test, std);
    let replay_source = prepare(&base, SplitArg::Train, std);
    let base_eval = prepare(&base, SplitArg::Test, std);
    info!(
        "adapting to {} (lambda {}, replay ratio {})",
        new[0].system(),
        cfg.lambda,
        cfg.replay_ratio
    );
    let outcome = adapt(
        &mut model,
        &AdaptData {
            new_train: &new_train,
            new_val: &new_val,
            replay_source: &replay_source,
            base_eval: &base_eval,
            new_eval: &new_eval,
        },
        std,
        &cfg,
    )?;
    let mut seen = ckpt.systems.clone();
    if !seen.iter().any(|s| s == new[0].system()) {
        seen.push(new[0].system().to_string());
    }
    ensure_parent(&args.out)?;
    Checkpoint::new(&model, std, seen, &cfg.train).save(&args.out)?;
    write_history(&sibling(&args.out, "history.csv"), &outcome.report.history)?;
    write_knowledge(&sibling(&args.out, "knowledge.csv"), &outcome.knowledge)?;
    write_metrics(
        &sibling(&args.out, "metrics.csv"),
        &[
            ("base_pre", &outcome.base_pre),
            ("base_post", &outcome.base_post),
            ("new_pre", &outcome.new_pre),
            ("new_post", &outcome.new_post),
        ],
    )?;
    write_toml(&sibling(&args.out, "config.toml"), &cfg)?;
    for task in TARGET_NAMES {
        if let Some(k) = outcome.knowledge.average(task, "nmae") {
            info!("mean knowledge loss {task}: {k:.3} NMAE points");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BranchRow<'a> {
    system: &'a str,
    branch: usize,
    from: usize,
    to: usize,
    score: f64,
    scenarios: usize,
    conductance: f64,
    susceptance: f64,
    rating: f64,
    transformer: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    system: &'a str,
    median: f64,
    frac_low: f64,
    frac_high: f64,
    branches: usize,
}

#[derive(Serialize)]
struct CorrelationCsvRow<'a> {
    system: &'a str,
    feature: &'a str,
    r: Option<f64>,
    branches: Option<usize>,
}

#[derive(Serialize)]
struct CoefficientRow<'a> {
    feature: &'a str,
    beta_std: Option<f64>,
}

fn explain(args: ExplainArgs) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&args.ckpt)?;
    let datasets = load_all(&args.data)?;
    let nets = networks(&datasets);
    let graphs = prepare(&datasets, args.split, &ckpt.standardizer);
    if graphs.is_empty() {
        bail!("no scenarios in the selected split");
    }
    fs::create_dir_all(&args.report)?;

    let records = attention_records(&model, &graphs, args.batch_size)?;
    let scores = branch_importance(&records);
    let mut per_system: BTreeMap<&str, SystemBranches> = BTreeMap::new();
    let mut rows = Vec::with_capacity(scores.len());
    for s in &scores {
        let d = branch_descriptors(&nets[&s.system], s.branch);
        let entry = per_system.entry(&s.system).or_insert_with(|| SystemBranches {
            system: s.system.clone(),
            descriptors: Vec::new(),
            scores: Vec::new(),
        });
        entry.descriptors.push(d);
        entry.scores.push(s.score);
        rows.push(BranchRow {
            system: &s.system,
            branch: s.branch,
            from: s.from,
            to: s.to,
            score: s.score,
            scenarios: s.scenarios,
            conductance: d[0],
            susceptance: d[1],
            rating: d[2],
            transformer: d[3],
        });
    }
    write_rows(&args.report.join("branch_importance.csv"), rows)?;

    let mut summaries = Vec::new();
    for (system, b) in &per_system {
        if let Some(s) = importance_distribution(&b.scores) {
            summaries.push(SummaryRow {
                system,
                median: s.median,
                frac_low: s.frac_low,
                frac_high: s.frac_high,
                branches: s.count,
            });
        }
        plot::histogram(&b.scores, 20, &args.report.join(format!("importance_hist_{system}.png")))?;
    }
    write_rows(&args.report.join("importance_summary.csv"), summaries)?;

    let systems: Vec<SystemBranches> = per_system.into_values().collect();
    let corr = importance_correlations(&systems);
    let mut corr_rows: Vec<CorrelationCsvRow> = corr
        .rows
        .iter()
        .map(|r| CorrelationCsvRow {
            system: &r.system,
            feature: &r.feature,
            r: r.r,
            branches: Some(r.branches),
        })
        .collect();
    corr_rows.extend(corr.mean_r.iter().map(|(feature, r)| CorrelationCsvRow {
        system: "mean",
        feature,
        r: *r,
        branches: None,
    }));
    write_rows(&args.report.join("correlations.csv"), corr_rows)?;
    write_rows(
        &args.report.join("regression.csv"),
        corr.beta_std.iter().map(|c| CoefficientRow {
            feature: &c.feature,
            beta_std: c.beta,
        }),
    )?;
    fs::write(args.report.join("notes.txt"), corr.notes.join("\n") + "\n")?;

    let baselines = mean_baselines(&graphs);
    let mut subset: Vec<Arc<PreparedGraph>> = Vec::new();
    let mut taken: BTreeMap<String, usize> = BTreeMap::new();
    for g in &graphs {
        let n = taken.entry(g.system.clone()).or_default();
        if *n < args.ig_scenarios {
            *n += 1;
            subset.push(g.clone());
        }
    }
    info!("integrated gradients on {} graphs, {} steps", subset.len(), args.steps);
    let sens = feature_sensitivity(&model, &subset, &baselines, args.steps as usize)?;
    let mut header = vec!["system".to_string(), "task".to_string()];
    header.extend(NODE_FEATURE_NAMES.iter().map(|s| s.to_string()));
    header.push("max_relative_residual".into());
    let table: Vec<Vec<String>> = sens
        .iter()
        .map(|s| {
            let mut row = vec![s.system.clone(), s.task.clone()];
            row.extend(s.shares.iter().map(|v| v.to_string()));
            row.push(s.max_relative_residual.to_string());
            row
        })
        .collect();
    write_table(&args.report.join("sensitivity.csv"), &header, &table)?;
    write_toml(&args.report.join("config.toml"), &args)?;
    info!("wrote interpretation report to {}", args.report.display());
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let datasets = load_all(&args.data)?;
    let mut failures = 0usize;
    for d in &datasets {
        let m = verify_labels(d)?;
        let worst = m.iter().copied().fold(0.0f64, f64::max);
        let bad = m.iter().filter(|&&v| !(v <= args.tolerance)).count();
        println!(
            "{}: {} scenarios, max mismatch {:.3e} pu, {} above {:.1e}",
            d.system(),
            m.len(),
            worst,
            bad,
            args.tolerance
        );
        failures += bad;
    }
    if failures > 0 {
        bail!("{failures} scenario(s) exceed the mismatch tolerance");
    }
    Ok(())
}
