//! Edge-aware GATv2 network with pre-norm residual blocks, a shared trunk and
//! four output heads `[V_m, δ, P_g, Q_g]` in standardized target space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gridflow_core::features::{EDGE_FEATURES, NODE_FEATURES, TARGETS};

use crate::batch::Batch;
use crate::error::{ModelError, ModelResult};
use crate::layers::{dropout, gatv2, graph_norm, GatVars};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of loss terms with a learned uncertainty scale.
pub const TASKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub trunk_width: usize,
    /// Glorot gain for the edge projection; edge features stay in physical units.
    pub edge_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            layers: 4,
            heads: 4,
            dropout: 0.1,
            trunk_width: 32,
            edge_init_gain: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.hidden_dim == 0 || self.layers == 0 || self.heads == 0 || self.trunk_width == 0 {
            return bad("hidden_dim, layers, heads and trunk_width must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("hidden_dim must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.edge_init_gain.is_finite() && self.edge_init_gain >= 0.0) {
            return bad("edge_init_gain must be finite and non-negative");
        }
        Ok(())
    }

    fn head_dim(&self, final_layer: bool) -> usize {
        if final_layer {
            self.hidden_dim
        } else {
            self.hidden_dim / self.heads
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIds {
    norm_shift: ParamId,
    norm_scale: ParamId,
    norm_bias: ParamId,
    w_source: ParamId,
    w_target: ParamId,
    w_edge: ParamId,
    attention: ParamId,
    w_head: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    input_w: ParamId,
    input_b: ParamId,
    trunk_w: ParamId,
    trunk_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    log_sigma: ParamId,
}

pub const LOG_SIGMA: &str = "log_sigma";

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

pub struct Forward {
    /// `N × 4` standardized predictions.
    pub pred: Var,
    /// Final-layer attention, `E × heads`.
    pub attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
    layers: Vec<LayerIds>,
}

fn param_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["input.weight".to_string(), "input.bias".to_string()];
    for l in 0..config.layers {
        for part in [
            "norm.shift",
            "norm.scale",
            "norm.bias",
            "gat.w_source",
            "gat.w_target",
            "gat.w_edge",
            "gat.attention",
        ] {
            names.push(format!("layer{l}.{part}"));
        }
        if l + 1 < config.layers {
            names.push(format!("layer{l}.w_head"));
        }
    }
    names.extend(
        ["trunk.weight", "trunk.bias", "output.weight", "output.bias", LOG_SIGMA].map(String::from),
    );
    names
}

impl Model {
    /// Fresh model with Glorot weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> ModelResult<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hid = config.hidden_dim;
        let mut store = ParamStore::new();
        store.add("input.weight", glorot(NODE_FEATURES, hid, 1.0, &mut rng), true);
        store.add("input.bias", Tensor::zeros(1, hid), true);
        for l in 0..config.layers {
            let last = l + 1 == config.layers;
            let width = config.heads * config.head_dim(last);
            store.add(format!("layer{l}.norm.shift"), Tensor::filled(1, hid, 1.0), true);
            store.add(format!("layer{l}.norm.scale"), Tensor::filled(1, hid, 1.0), true);
            store.add(format!("layer{l}.norm.bias"), Tensor::zeros(1, hid), true);
            store.add(format!("layer{l}.gat.w_source"), glorot(hid, width, 1.0, &mut rng), true);
            store.add(format!("layer{l}.gat.w_target"), glorot(hid, width, 1.0, &mut rng), true);
            store.add(
                format!("layer{l}.gat.w_edge"),
                glorot(EDGE_FEATURES, width, config.edge_init_gain, &mut rng),
                true,
            );
            store.add(
                format!("layer{l}.gat.attention"),
                glorot(1, width, 1.0, &mut rng),
                true,
            );
            if !last {
                store.add(format!("layer{l}.w_head"), glorot(width, hid, 1.0, &mut rng), true);
            }
        }
        store.add("trunk.weight", glorot(hid, config.trunk_width, 1.0, &mut rng), true);
        store.add("trunk.bias", Tensor::zeros(1, config.trunk_width), true);
        store.add("output.weight", glorot(config.trunk_width, TARGETS, 1.0, &mut rng), true);
        store.add("output.bias", Tensor::zeros(1, TARGETS), true);
        store.add(LOG_SIGMA, Tensor::zeros(1, TASKS), false);
        Model::from_params(config, store)
    }

    /// Binds an existing parameter store, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> ModelResult<Model> {
        config.validate()?;
        let names = param_names(&config);
        if params.len() != names.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameters, found {}",
                names.len(),
                params.len()
            )));
        }
        let hid = config.hidden_dim;
        let find = |name: &str, shape: (usize, usize)| -> ModelResult<ParamId> {
            let id = params
                .find(name)
                .ok_or_else(|| ModelError::MissingParam(name.into()))?;
            let value = params.value(id);
            if value.shape() != shape || value.data.len() != shape.0 * shape.1 {
                return Err(ModelError::MissingParam(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    value.shape()
                )));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let last = l + 1 == config.layers;
            let width = config.heads * config.head_dim(last);
            layers.push(LayerIds {
                norm_shift: find(&format!("layer{l}.norm.shift"), (1, hid))?,
                norm_scale: find(&format!("layer{l}.norm.scale"), (1, hid))?,
                norm_bias: find(&format!("layer{l}.norm.bias"), (1, hid))?,
                w_source: find(&format!("layer{l}.gat.w_source"), (hid, width))?,
                w_target: find(&format!("layer{l}.gat.w_target"), (hid, width))?,
                w_edge: find(&format!("layer{l}.gat.w_edge"), (EDGE_FEATURES, width))?,
                attention: find(&format!("layer{l}.gat.attention"), (1, width))?,
                w_head: if last {
                    None
                } else {
                    Some(find(&format!("layer{l}.w_head"), (width, hid))?)
                },
            });
        }
        let ids = Ids {
            input_w: find("input.weight", (NODE_FEATURES, hid))?,
            input_b: find("input.bias", (1, hid))?,
            trunk_w: find("trunk.weight", (hid, config.trunk_width))?,
            trunk_b: find("trunk.bias", (1, config.trunk_width))?,
            out_w: find("output.weight", (config.trunk_width, TARGETS))?,
            out_b: find("output.bias", (1, TARGETS))?,
            log_sigma: find(LOG_SIGMA, (1, TASKS))?,
        };
        if !params.all_finite() {
            return Err(ModelError::Format("non-finite parameter values".into()));
        }
        Ok(Model {
            config,
            params,
            ids,
            layers,
        })
    }

    pub fn log_sigma_id(&self) -> ParamId {
        self.ids.log_sigma
    }

    pub fn log_sigma(&self) -> [f64; TASKS] {
        let v = self.params.value(self.ids.log_sigma);
        std::array::from_fn(|k| v.data[k])
    }

    /// One pre-norm residual block.
    fn block(
        &self,
        tape: &mut Tape,
        h: Var,
        edge_features: Var,
        batch: &Batch,
        layer: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Var, Var) {
        let ids = &self.layers[layer];
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let shift = p(tape, ids.norm_shift);
        let scale = p(tape, ids.norm_scale);
        let bias = p(tape, ids.norm_bias);
        let normed = graph_norm(tape, h, shift, scale, bias, &batch.node_offsets);
        let vars = GatVars {
            w_source: p(tape, ids.w_source),
            w_target: p(tape, ids.w_target),
            w_edge: p(tape, ids.w_edge),
            attention: p(tape, ids.attention),
        };
        let heads = self.config.heads;
        let (messages, alpha) = gatv2(tape, normed, edge_features, &batch.src, &batch.dst, &vars, heads);
        let update = match ids.w_head {
            Some(w_head) => {
                let w = p(tape, w_head);
                let mixed = tape.matmul(messages, w);
                let act = tape.elu(mixed);
                match rng {
                    Some(r) => dropout(tape, act, self.config.dropout, &mut **r),
                    None => act,
                }
            }
            None => tape.head_mean(messages, heads),
        };
        (tape.add(h, update), alpha)
    }

    /// Runs the network on `features` (a standardized `N × NODE_FEATURES` node on `tape`).
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, features: Var, mode: Mode) -> ModelResult<Forward> {
        let shape = tape.value(features).shape();
        if shape != (batch.n_nodes(), NODE_FEATURES) {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{}x{NODE_FEATURES} node features", batch.n_nodes()),
                found: format!("{}x{}", shape.0, shape.1),
            });
        }
        if batch.edge_features.shape() != (batch.n_edges(), EDGE_FEATURES) {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{}x{EDGE_FEATURES} edge features", batch.n_edges()),
                found: format!("{:?}", batch.edge_features.shape()),
            });
        }
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        let ef = tape.constant(batch.edge_features.clone());
        let w = tape.param(&self.params, self.ids.input_w);
        let b = tape.param(&self.params, self.ids.input_b);
        let x = tape.matmul(features, w);
        let mut h = tape.add_row(x, b);
        let mut attention = None;
        for l in 0..self.layers.len() {
            let (next, alpha) = self.block(tape, h, ef, batch, l, &mut rng);
            h = next;
            attention = Some(alpha);
        }
        let tw = tape.param(&self.params, self.ids.trunk_w);
        let tb = tape.param(&self.params, self.ids.trunk_b);
        let t = tape.matmul(h, tw);
        let t = tape.add_row(t, tb);
        let t = tape.elu(t);
        let ow = tape.param(&self.params, self.ids.out_w);
        let ob = tape.param(&self.params, self.ids.out_b);
        let y = tape.matmul(t, ow);
        let pred = tape.add_row(y, ob);
        Ok(Forward {
            pred,
            attention: attention.expect("at least one layer"),
        })
    }

    /// Evaluation-mode predictions (standardized) and final-layer attention.
    pub fn predict(&self, batch: &Batch) -> ModelResult<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.features.clone());
        let out = self.forward(&mut tape, batch, x, Mode::Eval)?;
        Ok((tape.value(out.pred).clone(), tape.value(out.attention).clone()))
    }
}
