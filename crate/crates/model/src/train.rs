//! Training loop with static-loss warmup, uncertainty weighting and
//! two-phase early stopping.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gridflow_core::Standardizer;

use crate::batch::{Batch, PreparedGraph};
use crate::error::{ModelError, ModelResult};
use crate::loss::{breakdown, build_loss, LossBreakdown};
use crate::metrics::evaluate;
use crate::model::{Mode, Model, TASKS};
use crate::optim::{learning_rate, AdamW, SystemSampler};
use crate::params::ParamStore;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    /// Epochs trained on the plain loss sum before uncertainty weighting starts.
    pub static_warmup_epochs: usize,
    pub patience: usize,
    /// Allowed relative worsening of the validation metric when accepting a
    /// checkpoint with lower physics loss.
    pub physics_margin: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            warmup_epochs: 5,
            epochs: 100,
            min_lr: 1e-5,
            batch_size: 32,
            static_warmup_epochs: 50,
            patience: 20,
            physics_margin: 0.05,
            seed: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= lr");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.physics_margin >= 0.0) {
            return bad("weight_decay and physics_margin must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the training losses.
    pub train: LossBreakdown,
    /// Extra penalty added to the objective (zero outside adaptation).
    pub penalty: f64,
    pub val_metric: f64,
    pub val_physics: f64,
    pub phase: u8,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Supplies the graphs of each training batch for one epoch.
pub trait BatchSource {
    fn epoch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> ModelResult<Vec<Vec<Arc<PreparedGraph>>>>;
}

/// Draws as many graphs per epoch as there are training graphs, balanced across systems.
pub struct SampledSource {
    graphs: Vec<Arc<PreparedGraph>>,
    sampler: SystemSampler,
}

impl SampledSource {
    pub fn new(graphs: Vec<Arc<PreparedGraph>>) -> Self {
        let sampler = SystemSampler::new(graphs.iter().map(|g| g.system.as_str()));
        Self { graphs, sampler }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Arc<PreparedGraph> {
        self.graphs[self.sampler.sample(rng)].clone()
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

impl BatchSource for SampledSource {
    fn epoch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> ModelResult<Vec<Vec<Arc<PreparedGraph>>>> {
        if self.graphs.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let draws: Vec<_> = (0..self.graphs.len()).map(|_| self.draw(rng)).collect();
        Ok(draws.chunks(batch_size).map(<[_]>::to_vec).collect())
    }
}

/// Adds gradient of an extra objective term and returns its value.
pub trait GradientHook {
    fn apply(&self, params: &mut ParamStore) -> f64;
}

/// One optimization step on `batch`; returns its loss breakdown and hook penalty.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    batch: &Batch,
    std: &Standardizer,
    lr: f64,
    weighted: bool,
    rng: &mut ChaCha8Rng,
    hook: Option<&dyn GradientHook>,
) -> ModelResult<(LossBreakdown, f64)> {
    let mut tape = Tape::new();
    let graph = build_loss(&mut tape, model, batch, std, Mode::Train(rng), weighted)?;
    let parts = breakdown(&tape, &graph, model);
    if !parts.is_finite() {
        return Err(ModelError::Diverged { epoch: 0 });
    }
    let grads = tape.backward(graph.total);
    model.params.zero_grad();
    model.params.accumulate(&grads);
    let penalty = hook.map_or(0.0, |h| h.apply(&mut model.params));
    optimizer.step(&mut model.params, lr);
    Ok((parts, penalty))
}

/// Trains `model` in place and restores the checkpoint chosen by two-phase
/// early stopping: the best validation metric until it plateaus, then only
/// checkpoints that lower the validation physics loss while keeping the
/// metric within the configured margin of the best.
pub fn train(
    model: &mut Model,
    source: &mut dyn BatchSource,
    val: &[Arc<PreparedGraph>],
    std: &Standardizer,
    config: &TrainConfig,
    hook: Option<&dyn GradientHook>,
) -> ModelResult<TrainReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(&model.params, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, ParamStore)> = None;
    let mut best_metric = f64::INFINITY;
    let mut best_physics = f64::INFINITY;
    let mut phase = 1u8;
    let mut stale = 0usize;
    for epoch in 0..config.epochs {
        let lr = learning_rate(epoch, config.lr, config.min_lr, config.warmup_epochs, config.epochs);
        let weighted = epoch >= config.static_warmup_epochs;
        let batches = source.epoch(&mut rng, config.batch_size)?;
        let mut sum = [0.0; TASKS];
        let mut total = 0.0;
        let mut penalty = 0.0;
        for graphs in &batches {
            let batch = Batch::new(graphs.clone());
            let (parts, pen) = train_step(model, &mut optimizer, &batch, std, lr, weighted, &mut rng, hook)
                .map_err(|e| match e {
                    ModelError::Diverged { .. } => ModelError::Diverged { epoch },
                    other => other,
                })?;
            for (s, t) in sum.iter_mut().zip(parts.terms) {
                *s += t;
            }
            total += parts.total;
            penalty += pen;
        }
        if !model.params.all_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        let nb = batches.len().max(1) as f64;
        let train = LossBreakdown {
            terms: sum.map(|s| s / nb),
            total: total / nb,
            sigma: model.log_sigma().map(f64::exp),
        };
        let (val_metric, val_physics) = if val.is_empty() {
            (train.terms[..4].iter().sum::<f64>() / 4.0, train.terms[4])
        } else {
            let e = evaluate(model, val, std, config.eval_batch_size)?;
            (e.table.mean_nmae(), e.physics)
        };
        let mut accepted = false;
        if phase == 1 {
            if val_metric < best_metric {
                best_metric = val_metric;
                best_physics = val_physics;
                accepted = true;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    phase = 2;
                    stale = 0;
                }
            }
        } else if val_physics < best_physics && val_metric <= (1.0 + config.physics_margin) * best_metric {
            best_physics = val_physics;
            accepted = true;
            stale = 0;
        } else {
            stale += 1;
        }
        if accepted {
            best = Some((epoch, model.params.clone()));
        }
        log::info!(
            "epoch {epoch}: loss {:.4e} val nmae {:.4} physics {:.3e} phase {phase}{}",
            train.total,
            val_metric,
            val_physics,
            if accepted { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train,
            penalty: penalty / nb,
            val_metric,
            val_physics,
            phase,
            accepted,
        });
        if phase == 2 && stale >= config.patience {
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.params.zero_grad();
    Ok(TrainReport { history, best_epoch })
}

/// Trains on `train_graphs` with the system-balanced sampler.
pub fn train_model(
    model: &mut Model,
    train_graphs: &[Arc<PreparedGraph>],
    val: &[Arc<PreparedGraph>],
    std: &Standardizer,
    config: &TrainConfig,
) -> ModelResult<TrainReport> {
    if train_graphs.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut source = SampledSource::new(train_graphs.to_vec());
    train(model, &mut source, val, std, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::testutil::prepared;

    fn tiny_model() -> Model {
        Model::new(
            ModelConfig {
                hidden_dim: 8,
                layers: 2,
                heads: 2,
                trunk_width: 8,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: 1,
            static_warmup_epochs: 2,
            batch_size: 8,
            patience: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (graphs, std) = prepared("case4gs", 20, 1);
        let mut model = tiny_model();
        let before = model.params.flat_values();
        let cfg = TrainConfig {
            lr: 0.0,
            min_lr: 0.0,
            ..config(3)
        };
        train_model(&mut model, &graphs[..16], &graphs[16..], &std, &cfg).unwrap();
        assert_eq!(model.params.flat_values(), before);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (graphs, std) = prepared("case4gs", 24, 2);
        let run = || {
            let mut model = tiny_model();
            let report = train_model(&mut model, &graphs[..18], &graphs[18..], &std, &config(4)).unwrap();
            (model.params.flat_values(), serde_json::to_string(&report).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss() {
        let (graphs, std) = prepared("case9", 60, 3);
        let mut model = tiny_model();
        let report = train_model(&mut model, &graphs[..48], &graphs[48..], &std, &config(15)).unwrap();
        let first = report.history.first().unwrap().train.terms[0];
        let last = report.history.last().unwrap().train.terms[0];
        assert!(last < first, "{first} -> {last}");
        assert!(report.best_epoch.is_some());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            min_lr: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
        let bad = TrainConfig {
            warmup_epochs: 10,
            epochs: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_training_set() {
        let (graphs, std) = prepared("case4gs", 2, 1);
        let mut model = tiny_model();
        assert!(matches!(
            train_model(&mut model, &[], &graphs, &std, &config(1)),
            Err(ModelError::EmptyTrainingSet)
        ));
    }
}
