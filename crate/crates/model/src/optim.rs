//! AdamW with decoupled weight decay, the warmup-cosine learning-rate
//! schedule and the system-balanced sampler.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update using the accumulated gradients. Parameters without a
    /// gradient are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            for k in 0..p.value.data.len() {
                let g = grad.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * g;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[k] / c1;
                let v_hat = v.data[k] / c2;
                let x = &mut p.value.data[k];
                *x -= decay * *x;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup over `warmup` epochs then cosine decay to `min_lr` at `total`.
pub fn learning_rate(epoch: usize, base_lr: f64, min_lr: f64, warmup: usize, total: usize) -> f64 {
    if epoch < warmup {
        return base_lr * (epoch + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return min_lr;
    }
    let progress = ((epoch - warmup) as f64 / (total - warmup) as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Draws items with probability inversely proportional to their system's size,
/// so every system is visited equally often in expectation.
#[derive(Debug, Clone)]
pub struct SystemSampler {
    index: Option<WeightedIndex<f64>>,
    len: usize,
}

impl SystemSampler {
    pub fn new<'a>(systems: impl IntoIterator<Item = &'a str>) -> Self {
        let systems: Vec<&str> = systems.into_iter().collect();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &systems {
            *counts.entry(s).or_default() += 1;
        }
        let weights: Vec<f64> = systems.iter().map(|s| 1.0 / counts[s] as f64).collect();
        Self {
            index: WeightedIndex::new(&weights).ok(),
            len: systems.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.index
            .as_ref()
            .expect("sampling from an empty sampler")
            .sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]), true);
        let before = store.flat_values();
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..5 {
            store.zero_grad();
            store.add_grad(id, &Tensor::zeros(1, 3));
            opt.step(&mut store, 1e-3);
        }
        assert_eq!(store.flat_values(), before);
    }

    #[test]
    fn schedule_endpoints() {
        assert!((learning_rate(0, 1e-3, 1e-5, 10, 100) - 1e-4).abs() < 1e-18);
        assert!((learning_rate(9, 1e-3, 1e-5, 10, 100) - 1e-3).abs() < 1e-18);
        assert!((learning_rate(10, 1e-3, 1e-5, 10, 100) - 1e-3).abs() < 1e-18);
        assert!((learning_rate(100, 1e-3, 1e-5, 10, 100) - 1e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 10..=100 {
            let lr = learning_rate(e, 1e-3, 1e-5, 10, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn scalar_quadratic_matches_hand_recurrence() {
        // loss = (θ - 3)², θ₀ = 0, lr = 0.1, decay 0.01.
        let (lr, wd) = (0.1, 0.01);
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(0.0), true);
        let mut opt = AdamW::new(&store, wd);
        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let c = tape.constant(Tensor::scalar(3.0));
            let d = tape.sub(p, c);
            let l = tape.square(d);
            store.zero_grad();
            store.accumulate(&tape.backward(l));
            opt.step(&mut store, lr);

            let g = 2.0 * (theta - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * wd * theta;
            theta -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((store.value(id).item() - theta).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn parameters_without_gradient_are_skipped() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(2.0), true);
        let mut opt = AdamW::new(&store, 0.5);
        opt.step(&mut store, 1.0);
        assert_eq!(store.flat_values(), vec![2.0]);
    }

    #[test]
    fn single_system_is_uniform() {
        let sampler = SystemSampler::new(["a"; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[sampler.sample(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn unequal_systems_are_drawn_equally() {
        let mut systems = vec!["small"; 100];
        systems.extend(vec!["large"; 900]);
        let sampler = SystemSampler::new(systems.iter().copied());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let small = (0..draws).filter(|_| sampler.sample(&mut rng) < 100).count();
        let frac = small as f64 / draws as f64;
        // Binomial standard error at p = 0.5 is about 0.0016.
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn empty_sampler() {
        let sampler = SystemSampler::new(std::iter::empty());
        assert!(sampler.is_empty());
    }
}
