//! Adaptation to a new system with elastic weight consolidation and
//! experience replay, plus knowledge-loss accounting on the base systems.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gridflow_core::Standardizer;

use crate::batch::{Batch, PreparedGraph};
use crate::error::{ModelError, ModelResult};
use crate::loss::build_loss;
use crate::metrics::{evaluate, knowledge_loss, KnowledgeReport, MetricTable};
use crate::model::{Mode, Model};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{train, BatchSource, GradientHook, SampledSource, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub replay_ratio: f64,
    /// Buffer size as a fraction of the base training graphs.
    pub buffer_fraction: f64,
    pub train: TrainConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            replay_ratio: 0.3,
            buffer_fraction: 0.1,
            train: TrainConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::InvalidConfig("lambda must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(ModelError::InvalidConfig("replay_ratio must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.buffer_fraction) {
            return Err(ModelError::InvalidConfig("buffer_fraction must lie in [0, 1]".into()));
        }
        self.train.validate()
    }
}

/// Uniform sample without replacement of `fraction` of `graphs` (at least one
/// when both are nonzero), kept in source order.
pub fn build_replay_buffer(
    graphs: &[Arc<PreparedGraph>],
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<Arc<PreparedGraph>> {
    if graphs.is_empty() || fraction <= 0.0 {
        return Vec::new();
    }
    let size = ((graphs.len() as f64 * fraction).round() as usize).clamp(1, graphs.len());
    let mut picked = sample(rng, graphs.len(), size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| graphs[i].clone()).collect()
}

/// Mean of elementwise squared gradients.
pub fn empirical_fisher(grads: impl IntoIterator<Item = Vec<f64>>) -> ModelResult<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for g in grads {
        let a = acc.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, x) in a.iter_mut().zip(&g) {
            *s += x * x;
        }
        count += 1;
    }
    let acc = acc.ok_or(ModelError::EmptySample)?;
    Ok(acc.into_iter().map(|s| s / count as f64).collect())
}

/// Diagonal Fisher of the weighted total loss over `samples`, one graph at a
/// time in evaluation mode. The uncertainty scales are held fixed, so their
/// entries are zero.
pub fn compute_fisher(model: &Model, samples: &[Arc<PreparedGraph>], std: &Standardizer) -> ModelResult<Vec<f64>> {
    let sigma = model.log_sigma_id();
    let grads = samples
        .iter()
        .map(|g| {
            let batch = Batch::single(g.clone());
            let mut tape = Tape::new();
            let graph = build_loss(&mut tape, model, &batch, std, Mode::Eval, true)?;
            let grads = tape.backward(graph.total);
            let mut store = model.params.clone();
            store.zero_grad();
            store.accumulate(&grads);
            store.get_mut(sigma).grad = None;
            Ok(store.flat_grads())
        })
        .collect::<ModelResult<Vec<_>>>()?;
    empirical_fisher(grads)
}

/// Quadratic anchor `λ Σ F_j (θ_j − θ*_j)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ewc {
    pub lambda: f64,
    pub anchor: Vec<f64>,
    pub fisher: Vec<f64>,
}

impl Ewc {
    pub fn new(lambda: f64, anchor: &ParamStore, fisher: Vec<f64>) -> ModelResult<Self> {
        let anchor = anchor.flat_values();
        if anchor.len() != fisher.len() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} Fisher entries", anchor.len()),
                found: fisher.len().to_string(),
            });
        }
        if fisher.iter().any(|f| !(*f >= 0.0)) {
            return Err(ModelError::InvalidConfig("Fisher entries must be non-negative".into()));
        }
        Ok(Self {
            lambda,
            anchor,
            fisher,
        })
    }

    pub fn penalty(&self, params: &ParamStore) -> f64 {
        let theta = params.flat_values();
        self.lambda
            * theta
                .iter()
                .zip(&self.anchor)
                .zip(&self.fisher)
                .map(|((t, a), f)| f * (t - a) * (t - a))
                .sum::<f64>()
    }

    /// `2λF(θ − θ*)` in flat parameter order.
    pub fn gradient(&self, params: &ParamStore) -> Vec<f64> {
        params
            .flat_values()
            .iter()
            .zip(&self.anchor)
            .zip(&self.fisher)
            .map(|((t, a), f)| 2.0 * self.lambda * f * (t - a))
            .collect()
    }
}

impl GradientHook for Ewc {
    fn apply(&self, params: &mut ParamStore) -> f64 {
        let grad = self.gradient(params);
        let mut off = 0;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (rows, cols) = params.value(id).shape();
            let n = rows * cols;
            let g = Tensor::from_vec(rows, cols, grad[off..off + n].to_vec());
            params.add_grad(id, &g);
            off += n;
        }
        self.penalty(params)
    }
}

/// One batch where each slot comes from the buffer with probability `ratio`
/// and otherwise from the new data. No random draw decides the source when
/// `ratio` is zero.
pub fn build_mixed_batch(
    new: &SampledSource,
    buffer: &[Arc<PreparedGraph>],
    ratio: f64,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> ModelResult<Vec<Arc<PreparedGraph>>> {
    if new.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if ratio > 0.0 && buffer.is_empty() {
        return Err(ModelError::EmptyBuffer);
    }
    Ok((0..size)
        .map(|_| {
            if ratio > 0.0 && rng.gen_bool(ratio) {
                buffer[rng.gen_range(0..buffer.len())].clone()
            } else {
                new.draw(rng)
            }
        })
        .collect())
}

/// Epochs of mixed batches; each epoch has as many slots as new training graphs.
pub struct MixedSource {
    pub new: SampledSource,
    pub buffer: Vec<Arc<PreparedGraph>>,
    pub ratio: f64,
}

impl BatchSource for MixedSource {
    fn epoch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> ModelResult<Vec<Vec<Arc<PreparedGraph>>>> {
        let total = self.new.len();
        let mut out = Vec::new();
        let mut done = 0;
        while done < total {
            let size = batch_size.min(total - done);
            out.push(build_mixed_batch(&self.new, &self.buffer, self.ratio, size, rng)?);
            done += size;
        }
        Ok(out)
    }
}

/// Graphs the adaptation learns from and is judged on.
pub struct AdaptData<'a> {
    pub new_train: &'a [Arc<PreparedGraph>],
    pub new_val: &'a [Arc<PreparedGraph>],
    /// Base-system training graphs feeding the replay buffer.
    pub replay_source: &'a [Arc<PreparedGraph>],
    /// Base-system held-out graphs for knowledge loss.
    pub base_eval: &'a [Arc<PreparedGraph>],
    /// New-system held-out graphs.
    pub new_eval: &'a [Arc<PreparedGraph>],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub report: TrainReport,
    pub base_pre: MetricTable,
    pub base_post: MetricTable,
    pub new_pre: MetricTable,
    pub new_post: MetricTable,
    pub knowledge: KnowledgeReport,
    pub buffer_size: usize,
}

/// Fine-tunes `model` on the new system with EWC and replay, and reports the
/// change in base-system error.
pub fn adapt(model: &mut Model, data: &AdaptData, std: &Standardizer, config: &AdaptConfig) -> ModelResult<AdaptOutcome> {
    config.validate()?;
    let eval_bs = config.train.eval_batch_size;
    let base_pre = evaluate(model, data.base_eval, std, eval_bs)?.table;
    let new_pre = evaluate(model, data.new_eval, std, eval_bs)?.table;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5eed_b0ff);
    let buffer = build_replay_buffer(data.replay_source, config.buffer_fraction, &mut rng);
    let fisher = if config.lambda > 0.0 {
        compute_fisher(model, &buffer, std)?
    } else {
        vec![0.0; model.params.count()]
    };
    let ewc = Ewc::new(config.lambda, &model.params, fisher)?;
    let mut source = MixedSource {
        new: SampledSource::new(data.new_train.to_vec()),
        buffer,
        ratio: config.replay_ratio,
    };
    let report = train(model, &mut source, data.new_val, std, &config.train, Some(&ewc))?;
    let base_post = evaluate(model, data.base_eval, std, eval_bs)?.table;
    let new_post = evaluate(model, data.new_eval, std, eval_bs)?.table;
    let knowledge = knowledge_loss(&base_pre, &base_post, &base_pre.systems())?;
    Ok(AdaptOutcome {
        report,
        base_pre,
        base_post,
        new_pre,
        new_post,
        knowledge,
        buffer_size: source.buffer.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::testutil::prepared;
    use crate::train::train_model;

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                hidden_dim: 8,
                layers: 2,
                heads: 2,
                trunk_width: 8,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn fisher_of_quadratic_matches_hand_value() {
        // loss_i = (θ − x_i)² at θ = 1 has gradient 2(1 − x_i).
        let xs = [0.0, 2.0, 4.0];
        let grads = xs.iter().map(|x| vec![2.0 * (1.0 - x)]);
        let f = empirical_fisher(grads).unwrap();
        assert!((f[0] - (4.0 + 4.0 + 36.0) / 3.0).abs() < 1e-12);
        assert!(matches!(empirical_fisher(Vec::<Vec<f64>>::new()), Err(ModelError::EmptySample)));
    }

    #[test]
    fn single_scenario_fisher_is_squared_gradient_and_sigma_is_zero() {
        let (graphs, std) = prepared("case4gs", 1, 4);
        let model = tiny();
        let f = compute_fisher(&model, &graphs, &std).unwrap();
        let batch = Batch::single(graphs[0].clone());
        let mut tape = Tape::new();
        let lg = build_loss(&mut tape, &model, &batch, &std, Mode::Eval, true).unwrap();
        let mut store = model.params.clone();
        store.accumulate(&tape.backward(lg.total));
        let g = store.flat_grads();
        let sigma_len = 5;
        let n = g.len();
        for k in 0..n - sigma_len {
            assert_eq!(f[k], g[k] * g[k]);
        }
        assert!(f[n - sigma_len..].iter().all(|x| *x == 0.0));
        assert!(f.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn ewc_penalty_examples() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0), true);
        let mut anchor = store.clone();
        anchor.value_mut(id).data[0] = 1.0;
        let ewc = Ewc::new(0.5, &anchor, vec![1.0]).unwrap();
        assert!((ewc.penalty(&store) - 2.0).abs() < 1e-15);
        assert_eq!(ewc.gradient(&store), vec![2.0]);
        assert_eq!(ewc.penalty(&anchor), 0.0);
        let off = Ewc::new(0.0, &anchor, vec![1.0]).unwrap();
        assert_eq!(off.penalty(&store), 0.0);
        let before = store.grad(id).cloned();
        assert!(before.is_none());
        ewc.apply(&mut store);
        assert_eq!(store.grad(id).unwrap().item(), 2.0);
    }

    #[test]
    fn mixed_batch_ratios() {
        let (new, _) = prepared("case4gs", 10, 1);
        let (old, _) = prepared("case9", 10, 1);
        let source = SampledSource::new(new.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let count_old = |b: &[Arc<PreparedGraph>]| b.iter().filter(|g| g.system == "case9").count();
        let b = build_mixed_batch(&source, &old, 0.0, 50, &mut rng).unwrap();
        assert_eq!(count_old(&b), 0);
        let b = build_mixed_batch(&source, &old, 1.0, 50, &mut rng).unwrap();
        assert_eq!(count_old(&b), 50);
        let mut replayed = 0;
        for _ in 0..10_000 {
            replayed += count_old(&build_mixed_batch(&source, &old, 0.3, 10, &mut rng).unwrap());
        }
        let frac = replayed as f64 / 100_000.0;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
        assert!(matches!(
            build_mixed_batch(&source, &[], 0.3, 4, &mut rng),
            Err(ModelError::EmptyBuffer)
        ));
    }

    #[test]
    fn replay_buffer_is_uniform_subset() {
        let (graphs, _) = prepared("case4gs", 40, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let buf = build_replay_buffer(&graphs, 0.1, &mut rng);
        assert_eq!(buf.len(), 4);
        let mut idx: Vec<usize> = buf.iter().map(|g| g.index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 4);
    }

    #[test]
    fn without_anchor_or_replay_adapt_equals_training() {
        let (base, std) = prepared("case4gs", 20, 3);
        let (new, _) = prepared("case9", 24, 3);
        let train_cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            static_warmup_epochs: 1,
            batch_size: 6,
            ..Default::default()
        };
        let mut plain = tiny();
        train_model(&mut plain, &new[..18], &new[18..], &std, &train_cfg).unwrap();
        let mut adapted = tiny();
        let cfg = AdaptConfig {
            lambda: 0.0,
            replay_ratio: 0.0,
            train: train_cfg,
            ..Default::default()
        };
        let data = AdaptData {
            new_train: &new[..18],
            new_val: &new[18..],
            replay_source: &base[..16],
            base_eval: &base[16..],
            new_eval: &new[18..],
        };
        let out = adapt(&mut adapted, &data, &std, &cfg).unwrap();
        assert_eq!(plain.params.flat_values(), adapted.params.flat_values());
        for r in &out.knowledge.rows {
            assert_eq!(r.k, r.post - r.pre);
        }
    }
}
