//! Randomized operating scenarios: hierarchical load scaling, generator
//! scaling, branch parameter jitter and N-k branch outages, each solved with
//! the reference Newton-Raphson solver.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, GridResult};
use crate::network::{is_connected, BranchKind, Network};
use crate::solver::{solve_newton_raphson, PowerFlowSolution, SolverOptions};

/// Redraws allowed for a k-branch outage set before falling back to k-1.
pub const CONTINGENCY_RETRIES: usize = 50;
/// Solve attempts per scenario index before generation is declared stalled.
pub const MAX_ATTEMPTS: usize = 10;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub global_load_range: [f64; 2],
    pub regional_range: [f64; 2],
    pub jitter_range: [f64; 2],
    pub gen_scale_range: [f64; 2],
    pub branch_jitter_range: [f64; 2],
    pub max_outages: usize,
    /// Sampling weights for N-0, N-1 and N-2.
    pub class_weights: [f64; 3],
    /// Scale reactive demand with the same factor as active demand.
    #[serde(default = "default_true")]
    pub scale_reactive: bool,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            global_load_range: [0.7, 1.3],
            regional_range: [0.75, 1.25],
            jitter_range: [0.95, 1.05],
            gen_scale_range: [0.8, 1.2],
            branch_jitter_range: [0.9, 1.1],
            max_outages: 2,
            class_weights: [0.40, 0.36, 0.24],
            scale_reactive: true,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

impl RandomizationConfig {
    pub fn validate(&self) -> GridResult<()> {
        let ranges = [
            ("global_load_range", self.global_load_range),
            ("regional_range", self.regional_range),
            ("jitter_range", self.jitter_range),
            ("gen_scale_range", self.gen_scale_range),
            ("branch_jitter_range", self.branch_jitter_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(GridError::InvalidConfig(format!(
                    "{name} must satisfy low <= high, got [{lo}, {hi}]"
                )));
            }
        }
        if self.max_outages > 2 {
            return Err(GridError::InvalidConfig(format!(
                "max_outages must be 0, 1 or 2, got {}",
                self.max_outages
            )));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0))
            || self.class_weights[..=self.max_outages].iter().sum::<f64>() <= 0.0
        {
            return Err(GridError::InvalidConfig(
                "class_weights must be nonnegative with a positive allowed total".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContingencyClass {
    N0,
    N1,
    N2,
}

impl ContingencyClass {
    pub const ALL: [ContingencyClass; 3] =
        [ContingencyClass::N0, ContingencyClass::N1, ContingencyClass::N2];

    pub fn from_outages(k: usize) -> Self {
        match k {
            0 => ContingencyClass::N0,
            1 => ContingencyClass::N1,
            _ => ContingencyClass::N2,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub base_system: String,
    /// One factor per entry of `Network::loads`.
    pub load_scales: Vec<f64>,
    pub gen_scale: f64,
    /// `(r, x, b)` factors per branch.
    pub branch_scales: Vec<[f64; 3]>,
    pub outages: BTreeSet<usize>,
    pub contingency_class: ContingencyClass,
    pub solution: PowerFlowSolution,
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub reactive_scaled: bool,
}

impl Scenario {
    /// The perturbed network this scenario was solved on.
    pub fn network(&self, base: &Network) -> Network {
        perturbed_network(
            base,
            &self.load_scales,
            self.gen_scale,
            &self.branch_scales,
            &self.outages,
            self.reactive_scaled,
        )
    }
}

pub fn perturbed_network(
    base: &Network,
    load_scales: &[f64],
    gen_scale: f64,
    branch_scales: &[[f64; 3]],
    outages: &BTreeSet<usize>,
    scale_reactive: bool,
) -> Network {
    let mut net = base.with_outages(outages);
    for (load, &rho) in net.loads.iter_mut().zip(load_scales) {
        load.p_d *= rho;
        if scale_reactive {
            load.q_d *= rho;
        }
    }
    for g in &mut net.generators {
        g.p_set *= gen_scale;
    }
    for (br, s) in net.branches.iter_mut().zip(branch_scales) {
        if br.kind == BranchKind::Switch {
            continue;
        }
        br.r *= s[0];
        br.x *= s[1];
        br.b_charging *= s[2];
    }
    net
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Per-load factor `ρ = γ · R(region) · J(bus)` where a region is the set of
/// buses sharing a nominal voltage.
pub fn randomize_loads(net: &Network, config: &RandomizationConfig, rng: &mut impl Rng) -> Vec<f64> {
    let global = draw(rng, config.global_load_range);
    let mut regions: BTreeMap<u64, f64> = BTreeMap::new();
    for bus in &net.buses {
        regions.entry(bus.v_nominal.to_bits()).or_insert(0.0);
    }
    for factor in regions.values_mut() {
        *factor = draw(rng, config.regional_range);
    }
    let per_bus: Vec<f64> = (0..net.n_buses())
        .map(|_| draw(rng, config.jitter_range))
        .collect();
    net.loads
        .iter()
        .map(|load| {
            let region = regions[&net.buses[load.bus].v_nominal.to_bits()];
            global * region * per_bus[load.bus]
        })
        .collect()
}

pub fn jitter_branches(
    net: &Network,
    config: &RandomizationConfig,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    let range = config.branch_jitter_range;
    net.branches
        .iter()
        .map(|_| [draw(rng, range), draw(rng, range), draw(rng, range)])
        .collect()
}

/// Draws exactly `k` in-service branches whose removal keeps the network connected.
pub fn sample_outages(net: &Network, k: usize, rng: &mut impl Rng) -> GridResult<BTreeSet<usize>> {
    if k == 0 {
        return Ok(BTreeSet::new());
    }
    let candidates: Vec<usize> = net.active_branches().map(|(i, _)| i).collect();
    if candidates.len() < k {
        return Err(GridError::NoFeasibleContingency { k, attempts: 0 });
    }
    for _ in 0..CONTINGENCY_RETRIES {
        let picked: BTreeSet<usize> = rand::seq::index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        if is_connected(net, &picked) {
            return Ok(picked);
        }
    }
    Err(GridError::NoFeasibleContingency {
        k,
        attempts: CONTINGENCY_RETRIES,
    })
}

/// Draws an outage class from the configured weights, then an outage set of
/// that size, degrading to fewer outages when every candidate islands the network.
pub fn sample_contingency(
    net: &Network,
    config: &RandomizationConfig,
    rng: &mut impl Rng,
) -> GridResult<BTreeSet<usize>> {
    let max_k = config.max_outages.min(2);
    let weights = &config.class_weights[..=max_k];
    let dist = WeightedIndex::new(weights)
        .map_err(|e| GridError::InvalidConfig(format!("class_weights: {e}")))?;
    let mut k = dist.sample(rng);
    loop {
        match sample_outages(net, k, rng) {
            Ok(set) => return Ok(set),
            Err(GridError::NoFeasibleContingency { .. }) if k > 0 => k -= 1,
            Err(e) => return Err(e),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent 64-bit seed for one scenario attempt.
pub fn scenario_seed(master: u64, index: usize, attempt: usize) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(index as u64)) ^ (attempt as u64))
}

/// One randomized scenario from a single seed; `Ok(None)` when the solver fails.
pub fn draw_scenario(
    base: &Network,
    config: &RandomizationConfig,
    seed: u64,
) -> GridResult<Option<Scenario>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let load_scales = randomize_loads(base, config, &mut rng);
    let gen_scale = draw(&mut rng, config.gen_scale_range);
    let branch_scales = jitter_branches(base, config, &mut rng);
    let outages = sample_contingency(base, config, &mut rng)?;
    let net = perturbed_network(
        base,
        &load_scales,
        gen_scale,
        &branch_scales,
        &outages,
        config.scale_reactive,
    );
    match solve_newton_raphson(&net, &config.solver) {
        Ok(solution) => Ok(Some(Scenario {
            base_system: base.name.clone(),
            load_scales,
            gen_scale,
            branch_scales,
            contingency_class: ContingencyClass::from_outages(outages.len()),
            outages,
            solution,
            rng_seed: seed,
            reactive_scaled: config.scale_reactive,
        })),
        Err(GridError::NotConverged { .. } | GridError::SingularJacobian { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Solved scenario for `index`, redrawing with a fresh seed after solver failures.
pub fn generate_scenario(
    base: &Network,
    config: &RandomizationConfig,
    index: usize,
) -> GridResult<Scenario> {
    for attempt in 0..MAX_ATTEMPTS {
        let seed = scenario_seed(config.seed, index, attempt);
        if let Some(s) = draw_scenario(base, config, seed)? {
            return Ok(s);
        }
    }
    Err(GridError::GenerationStalled {
        index,
        discarded: MAX_ATTEMPTS,
        attempts: MAX_ATTEMPTS,
    })
}

/// `n` solved scenarios in index order; generated in parallel.
pub fn generate_scenarios(
    base: &Network,
    n: usize,
    config: &RandomizationConfig,
) -> GridResult<Vec<Scenario>> {
    config.validate()?;
    let violations = crate::network::validate_network(base);
    if !violations.is_empty() {
        return Err(GridError::InvalidNetwork(violations));
    }
    (0..n)
        .into_par_iter()
        .map(|i| generate_scenario(base, config, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seeded 80/10/10 assignment: a permutation whose first `round(0.8 n)` entries
/// train, the next `round(0.1 n)` validate and the rest test.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED_5B11_7000_0000));
    order.shuffle(&mut rng);
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::*;
    use crate::network::BusType;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn case14() -> Network {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/case14.json");
        Network::from_json_file(path).unwrap()
    }

    #[test]
    fn degenerate_ranges_give_unit_scales() {
        let net = case14();
        let config = RandomizationConfig {
            global_load_range: [1.0, 1.0],
            regional_range: [1.0, 1.0],
            jitter_range: [1.0, 1.0],
            branch_jitter_range: [1.0, 1.0],
            ..Default::default()
        };
        let mut r = rng(1);
        assert!(randomize_loads(&net, &config, &mut r).iter().all(|&x| x == 1.0));
        assert!(jitter_branches(&net, &config, &mut r)
            .iter()
            .all(|s| *s == [1.0; 3]));
    }

    #[test]
    fn load_scales_stay_within_product_bounds() {
        let net = case14();
        let config = RandomizationConfig::default();
        let mut r = rng(2);
        for _ in 0..2000 {
            for rho in randomize_loads(&net, &config, &mut r) {
                assert!((0.49875..=1.70625).contains(&rho), "{rho}");
            }
        }
    }

    #[test]
    fn same_region_shares_factor() {
        let mut net = ring4();
        net.buses[1].v_nominal = 69.0;
        net.buses[2].v_nominal = 69.0;
        let config = RandomizationConfig {
            global_load_range: [1.0, 1.0],
            jitter_range: [1.0, 1.0],
            ..Default::default()
        };
        let mut r = rng(3);
        let mut differs = false;
        for _ in 0..50 {
            let s = randomize_loads(&net, &config, &mut r);
            assert_eq!(s[0], s[1]);
        }
        let config = RandomizationConfig {
            global_load_range: [1.0, 1.0],
            regional_range: [1.0, 1.0],
            ..Default::default()
        };
        for _ in 0..50 {
            let s = randomize_loads(&net, &config, &mut r);
            differs |= s[0] != s[1];
        }
        assert!(differs);
    }

    #[test]
    fn branch_jitter_within_range_and_unbiased() {
        let net = two_bus(0.01, 0.1);
        let config = RandomizationConfig::default();
        let mut r = rng(4);
        let mut sum = 0.0;
        let mut count = 0;
        while count < 100_000 {
            for s in jitter_branches(&net, &config, &mut r)[0] {
                assert!((0.9..=1.1).contains(&s));
                sum += s;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((mean - 1.0).abs() < 0.002, "{mean}");
    }

    #[test]
    fn zero_outages_when_class_zero() {
        let config = RandomizationConfig {
            max_outages: 0,
            ..Default::default()
        };
        let mut r = rng(5);
        assert!(sample_contingency(&case14(), &config, &mut r)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn bridge_only_network_degrades_to_intact() {
        let config = RandomizationConfig {
            max_outages: 1,
            class_weights: [0.0, 1.0, 0.0],
            ..Default::default()
        };
        let mut r = rng(6);
        assert!(sample_contingency(&two_bus(0.0, 0.1), &config, &mut r)
            .unwrap()
            .is_empty());
        assert!(matches!(
            sample_outages(&two_bus(0.0, 0.1), 1, &mut r),
            Err(GridError::NoFeasibleContingency { k: 1, .. })
        ));
    }

    #[test]
    fn class_frequencies_follow_weights() {
        let net = case14();
        let config = RandomizationConfig {
            class_weights: [0.36, 0.34, 0.30],
            ..Default::default()
        };
        let mut r = rng(7);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let set = sample_contingency(&net, &config, &mut r).unwrap();
            assert!(is_connected(&net, &set));
            counts[set.len()] += 1;
        }
        for (c, w) in counts.iter().zip(config.class_weights) {
            let f = *c as f64 / draws as f64;
            assert!((f - w).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn reactive_scaling_switch() {
        let net = ring4();
        let scaled = perturbed_network(&net, &[2.0, 2.0], 1.0, &[[1.0; 3]; 4], &BTreeSet::new(), true);
        let fixed = perturbed_network(&net, &[2.0, 2.0], 1.0, &[[1.0; 3]; 4], &BTreeSet::new(), false);
        assert_eq!(scaled.loads[0].q_d, 0.6);
        assert_eq!(fixed.loads[0].q_d, 0.3);
        assert_eq!(fixed.loads[0].p_d, 1.6);
    }

    #[test]
    fn scenarios_are_solved_connected_and_deterministic() {
        let net = case14();
        let config = RandomizationConfig {
            seed: 11,
            ..Default::default()
        };
        let a = generate_scenarios(&net, 40, &config).unwrap();
        let b = generate_scenarios(&net, 40, &config).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.solution.converged);
            assert_eq!(s.outages.len(), s.contingency_class.index());
            assert!(is_connected(&net, &s.outages));
            let slack = net.slack_bus().unwrap();
            assert_eq!(s.solution.delta[slack], 0.0);
            assert_eq!(net.buses[slack].bus_type, BusType::Slack);
        }
    }

    #[test]
    fn seeds_differ_per_index_and_attempt() {
        let mut seen = BTreeSet::new();
        for i in 0..100 {
            for a in 0..3 {
                assert!(seen.insert(scenario_seed(42, i, a)));
            }
        }
    }

    #[test]
    fn split_proportions() {
        for n in [0, 1, 7, 10, 99, 1000] {
            let s = assign_splits(n, 3);
            let train = s.iter().filter(|&&x| x == Split::Train).count();
            let val = s.iter().filter(|&&x| x == Split::Val).count();
            assert!((train as f64 - 0.8 * n as f64).abs() <= 1.0);
            assert!((val as f64 - 0.1 * n as f64).abs() <= 1.0);
            assert!(((n - train - val) as f64 - 0.1 * n as f64).abs() <= 1.0);
        }
        assert_eq!(assign_splits(50, 9), assign_splits(50, 9));
    }

    #[test]
    fn invalid_config_rejected() {
        let c = RandomizationConfig {
            regional_range: [1.2, 0.8],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = RandomizationConfig {
            max_outages: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
