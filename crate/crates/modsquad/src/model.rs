//! MoE attention and MLP layers, transformer blocks, and the multi-task
//! model with per-task routers, task embeddings, and heads.
//!
//! Each MoE layer holds N homogeneous experts and M task-specific routers.
//! The layer output is sum_k gate_k(x) * E_k(x + e_task): the router sees
//! the raw layer input while experts see it shifted by the task embedding.
//! Only selected experts are evaluated.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::error::ModSquadError;
use crate::routing::{self, GateVector, RouterParams, TaskEmbeddingTable};
use crate::tensor::{Graph, Tensor, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub moe_every: usize,
    pub n_experts_attn: usize,
    pub k_attn: usize,
    pub n_experts_mlp: usize,
    pub k_mlp: usize,
    pub base_hidden: usize,
    pub base_head_dim: usize,
    pub flops_matched: bool,
    pub renormalize_gates: bool,
    pub n_tasks: usize,
    pub head_dims: Vec<usize>,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn d_hidden(&self) -> usize {
        if self.flops_matched {
            self.base_hidden / self.k_mlp
        } else {
            self.base_hidden
        }
    }

    pub fn d_head(&self) -> usize {
        if self.flops_matched {
            self.base_head_dim / self.k_attn
        } else {
            self.base_head_dim
        }
    }

    /// Blocks carry MoE layers on every `moe_every`-th position; other
    /// blocks get a single dense expert with a trivial router.
    pub fn block_is_moe(&self, b: usize) -> bool {
        (b + 1) % self.moe_every == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Attn,
    Mlp,
}

#[derive(Debug, Clone)]
pub enum ExpertParams {
    Mlp { w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor },
    Attn { w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor },
}

impl ExpertParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            ExpertParams::Mlp { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
            ExpertParams::Attn { w_q, w_k, w_v, w_o } => {
                vec![("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_o", w_o)]
            }
        }
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            ExpertParams::Mlp { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
            ExpertParams::Attn { w_q, w_k, w_v, w_o } => {
                vec![("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_o", w_o)]
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// One MoE layer: experts plus per-task routers. A pruned layer keeps a
/// subset of expert slots; `expert_cols` maps each slot to its router
/// column, and the router keeps its full width so surviving gate values
/// retain the original softmax mass.
#[derive(Debug, Clone)]
pub struct MoELayerParams {
    pub kind: LayerKind,
    pub experts: Vec<ExpertParams>,
    /// Router column for each expert slot.
    pub expert_cols: Vec<usize>,
    /// Router output width (the original expert count of this layer).
    pub n_cols: usize,
    pub routers: Vec<RouterParams>,
    pub k: usize,
    /// False for the dense single-expert stand-in layers.
    pub is_moe: bool,
}

impl MoELayerParams {
    /// Selection mask over router columns; None when no expert was removed.
    pub fn allowed(&self) -> Option<Vec<bool>> {
        if self.expert_cols.len() == self.n_cols {
            return None;
        }
        let mut mask = vec![false; self.n_cols];
        for &c in &self.expert_cols {
            mask[c] = true;
        }
        Some(mask)
    }

    pub fn expert_numel(&self) -> usize {
        self.experts.iter().map(|e| e.numel()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: MoELayerParams,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp: MoELayerParams,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModSquadModel {
    pub config: ModelConfig,
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub task_embed: TaskEmbeddingTable,
    pub heads: Vec<HeadParams>,
    /// [M x 1] log-variance weights realizing the auto-balancing task weights.
    pub log_var: Tensor,
    /// Parameters excluded from gradient computation (router fine-tuning).
    pub frozen: BTreeSet<String>,
}

fn new_layer(config: &ModelConfig, kind: LayerKind, is_moe: bool) -> MoELayerParams {
    let d = config.d_model;
    let (n, k) = if is_moe {
        match kind {
            LayerKind::Attn => (config.n_experts_attn, config.k_attn),
            LayerKind::Mlp => (config.n_experts_mlp, config.k_mlp),
        }
    } else {
        (1, 1)
    };
    // flops_matched divides per-expert width by the layer's own K
    let d_head = if is_moe { config.d_head() } else { config.base_head_dim };
    let d_hidden = if is_moe { config.d_hidden() } else { config.base_hidden };
    let experts = (0..n)
        .map(|_| match kind {
            LayerKind::Attn => ExpertParams::Attn {
                w_q: Tensor::zeros(vec![d, d_head]),
                w_k: Tensor::zeros(vec![d, d_head]),
                w_v: Tensor::zeros(vec![d, d_head]),
                w_o: Tensor::zeros(vec![d_head, d]),
            },
            LayerKind::Mlp => ExpertParams::Mlp {
                w1: Tensor::zeros(vec![d, d_hidden]),
                b1: Tensor::zeros(vec![1, d_hidden]),
                w2: Tensor::zeros(vec![d_hidden, d]),
                b2: Tensor::zeros(vec![1, d]),
            },
        })
        .collect();
    let routers = (0..config.n_tasks)
        .map(|_| RouterParams {
            w_g: Tensor::zeros(vec![d, n]),
            w_noise: Tensor::zeros(vec![d, n]),
        })
        .collect();
    MoELayerParams { kind, experts, expert_cols: (0..n).collect(), n_cols: n, routers, k, is_moe }
}

impl ModSquadModel {
    pub fn new(config: &ModelConfig) -> Self {
        assert_eq!(config.head_dims.len(), config.n_tasks, "one head dim per task");
        let d = config.d_model;
        let blocks = (0..config.blocks)
            .map(|b| {
                let is_moe = config.block_is_moe(b);
                BlockParams {
                    ln1_g: Tensor::new(vec![1, d], vec![1.0; d]),
                    ln1_b: Tensor::zeros(vec![1, d]),
                    attn: new_layer(config, LayerKind::Attn, is_moe),
                    ln2_g: Tensor::new(vec![1, d], vec![1.0; d]),
                    ln2_b: Tensor::zeros(vec![1, d]),
                    mlp: new_layer(config, LayerKind::Mlp, is_moe),
                }
            })
            .collect();
        let heads = config
            .head_dims
            .iter()
            .map(|&out| HeadParams {
                w: Tensor::zeros(vec![d, out]),
                b: Tensor::zeros(vec![1, out]),
            })
            .collect();
        ModSquadModel {
            config: config.clone(),
            in_w: Tensor::zeros(vec![config.d_in, d]),
            in_b: Tensor::zeros(vec![1, d]),
            pos_embed: Tensor::zeros(vec![config.seq_len, d]),
            blocks,
            final_ln_g: Tensor::new(vec![1, d], vec![1.0; d]),
            final_ln_b: Tensor::zeros(vec![1, d]),
            task_embed: TaskEmbeddingTable {
                embeddings: Tensor::zeros(vec![config.n_tasks, d]),
            },
            heads,
            log_var: Tensor::zeros(vec![config.n_tasks, 1]),
            frozen: BTreeSet::new(),
        }
    }

    /// Weights ~ N(0, 0.02^2); layer-norm gains 1, biases and log_var 0.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf17]));
        self.visit_params_mut(&mut |name, t| {
            let is_gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "final_ln.g";
            let is_zero = name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with("ln1.b")
                || name.ends_with("ln2.b")
                || name == "final_ln.b"
                || name == "in_proj.b"
                || name == "log_var"
                || (name.starts_with("head") && name.ends_with(".b"));
            if is_gain {
                t.data.fill(1.0);
            } else if is_zero {
                t.data.fill(0.0);
            } else {
                for v in &mut t.data {
                    *v = routing::randn(&mut rng) * 0.02;
                }
            }
        });
    }

    /// Global layer index of (block, sublayer): attention first, MLP second.
    pub fn layer_index(block: usize, kind: LayerKind) -> usize {
         2 * block + if kind == LayerKind::Attn { 0 } else { 1 }
    }

    pub fn n_layers(&self) -> usize {
        2 * self.blocks.len()
    }

    pub fn layer(&self, idx: usize) -> &MoELayerParams {
        let b = &self.blocks[idx / 2];
        if idx % 2 == 0 {
            &b.attn
        } else {
            &b.mlp
        }
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut MoELayerParams {
        let b = &mut self.blocks[idx / 2];
        if idx % 2 == 0 {
            &mut b.attn
        } else {
            &mut b.mlp
        }
    }

    pub fn layer_name(&self, idx: usize) -> String {
        format!("block{}.{}", idx / 2, if idx % 2 == 0 { "attn" } else { "mlp" })
    }

    /// Indices of the real MoE layers (dense stand-ins excluded).
    pub fn moe_layer_indices(&self) -> Vec<usize> {
        (0..self.n_layers()).filter(|&i| self.layer(i).is_moe).collect()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("in_proj.w", &self.in_w);
        f("in_proj.b", &self.in_b);
        f("pos_embed", &self.pos_embed);
        for (b, block) in self.blocks.iter().enumerate() {
            f(&format!("block{b}.ln1.g"), &block.ln1_g);
            f(&format!("block{b}.ln1.b"), &block.ln1_b);
            visit_layer(&format!("block{b}.attn"), &block.attn, f);
            f(&format!("block{b}.ln2.g"), &block.ln2_g);
            f(&format!("block{b}.ln2.b"), &block.ln2_b);
            visit_layer(&format!("block{b}.mlp"), &block.mlp, f);
        }
        f("final_ln.g", &self.final_ln_g);
        f("final_ln.b", &self.final_ln_b);
        f("task_embed", &self.task_embed.embeddings);
        for (t, head) in self.heads.iter().enumerate() {
            f(&format!("head{t}.w"), &head.w);
            f(&format!("head{t}.b"), &head.b);
        }
        f("log_var", &self.log_var);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("in_proj.w", &mut self.in_w);
        f("in_proj.b", &mut self.in_b);
        f("pos_embed", &mut self.pos_embed);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{b}.ln1.g"), &mut block.ln1_g);
            f(&format!("block{b}.ln1.b"), &mut block.ln1_b);
            visit_layer_mut(&format!("block{b}.attn"), &mut block.attn, f);
            f(&format!("block{b}.ln2.g"), &mut block.ln2_g);
            f(&format!("block{b}.ln2.b"), &mut block.ln2_b);
            visit_layer_mut(&format!("block{b}.mlp"), &mut block.mlp, f);
        }
        f("final_ln.g", &mut self.final_ln_g);
        f("final_ln.b", &mut self.final_ln_b);
        f("task_embed", &mut self.task_embed.embeddings);
        for (t, head) in self.heads.iter_mut().enumerate() {
            f(&format!("head{t}.w"), &mut head.w);
            f(&format!("head{t}.b"), &mut head.b);
        }
        f("log_var", &mut self.log_var);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> &Tensor {
        let mut found: Option<*const Tensor> = None;
        self.visit_params(&mut |n, t| {
            if n == name {
                found = Some(t as *const Tensor);
            }
        });
        let ptr = found.unwrap_or_else(|| panic!("unknown parameter {name}"));
        // visit borrows self; the pointer stays valid for self's lifetime
        unsafe { &*ptr }
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let mut found: Option<*mut Tensor> = None;
        self.visit_params_mut(&mut |n, t| {
            if n == name {
                found = Some(t as *mut Tensor);
            }
        });
        let ptr = found.unwrap_or_else(|| panic!("unknown parameter {name}"));
        unsafe { &mut *ptr }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn expert_param_count(&self) -> usize {
        (0..self.n_layers()).map(|i| self.layer(i).expert_numel()).sum()
    }

    /// Insert every parameter as a graph leaf; frozen names get no gradient.
    pub fn insert_params(&self, g: &mut Graph) -> GraphParams {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            let id = g.leaf(t.clone(), !self.frozen.contains(name));
            map.insert(name.to_string(), id);
        });
        GraphParams { map }
    }

    /// Build the forward graph for one task's token batch
    /// (`x` is [B*seq_len x d_in]).
    pub fn forward_task(
        &self,
        g: &mut Graph,
        params: &GraphParams,
        x: &Tensor,
        task: usize,
        mode: ForwardMode,
    ) -> Result<TaskForward, ModSquadError> {
        if task >= self.config.n_tasks {
            return Err(ModSquadError::UnknownTask { task, n_tasks: self.config.n_tasks });
        }
        let l = self.config.seq_len;
        assert!(
            x.rows() % l == 0,
            "batch rows {} not divisible by seq_len {l}",
            x.rows()
        );
        let tokens = x.rows();
        let eps = self.config.ln_eps;

        let xid = g.constant(x.clone());
        let proj = g.matmul(xid, params.id("in_proj.w"));
        let mut h = g.add_row(proj, params.id("in_proj.b"));
        let pos_idx: Vec<usize> = (0..tokens).map(|i| i % l).collect();
        let pos = g.row_gather(params.id("pos_embed"), &pos_idx);
        h = g.add(h, pos);

        let mut gate_records = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (kind, layer) in [(LayerKind::Attn, &block.attn), (LayerKind::Mlp, &block.mlp)] {
                let (ln_g, ln_b) = match kind {
                    LayerKind::Attn => (format!("block{b}.ln1"), &block.ln1_g),
                    LayerKind::Mlp => (format!("block{b}.ln2"), &block.ln2_g),
                };
                let _ = ln_b;
                let normed = g.layer_norm(h, eps);
                let scaled = g.mul_row(normed, params.id(&format!("{ln_g}.g")));
                let ln_out = g.add_row(scaled, params.id(&format!("{ln_g}.b")));
                let prefix = self.layer_name(Self::layer_index(b, kind));
                let layer_idx = Self::layer_index(b, kind);
                let (y, record) = moe_layer_forward_graph(
                    g,
                    layer,
                    &LayerIdSource::Params { params, prefix: &prefix },
                    ln_out,
                    task,
                    layer_idx,
                    l,
                    self.config.renormalize_gates,
                    mode,
                    None,
                )?;
                gate_records.push(record);
                h = g.add(h, y);
            }
        }
        let normed = g.layer_norm(h, eps);
        let scaled = g.mul_row(normed, params.id("final_ln.g"));
        let hfinal = g.add_row(scaled, params.id("final_ln.b"));
        let pooled = g.mean_pool(hfinal, l);
        let hw = g.matmul(pooled, params.id(&format!("head{task}.w")));
        let preds = g.add_row(hw, params.id(&format!("head{task}.b")));
        Ok(TaskForward { preds, gate_records })
    }

    /// Eval-mode forward returning values: predictions plus per-layer gate
    /// vectors for usage accounting.
    pub fn model_forward(
        &self,
        batch: &Tensor,
        task: usize,
    ) -> Result<(Tensor, Vec<LayerGates>), ModSquadError> {
        let mut g = Graph::new();
        let params = self.insert_params_frozen(&mut g);
        let fwd = self.forward_task(&mut g, &params, batch, task, ForwardMode::Eval)?;
        let preds = g.value(fwd.preds).clone();
        let gate_log = fwd
            .gate_records
            .iter()
            .map(|r| LayerGates {
                layer: r.layer,
                is_moe: r.is_moe,
                k: r.k,
                n_cols: r.n_cols,
                gates: routing::gates_to_vectors(g.value(r.gates)),
                probs: g.value(r.probs).clone(),
                per_token_eval_counts: r.per_token_eval_counts.clone(),
                dispatched: r.dispatched.clone(),
            })
            .collect();
        Ok((preds, gate_log))
    }

    /// Parameter insertion with every leaf non-differentiable (pure inference).
    pub fn insert_params_frozen(&self, g: &mut Graph) -> GraphParams {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            let id = g.leaf(t.clone(), false);
            map.insert(name.to_string(), id);
        });
        GraphParams { map }
    }
}

fn visit_layer(prefix: &str, layer: &MoELayerParams, f: &mut dyn FnMut(&str, &Tensor)) {
    for (slot, expert) in layer.experts.iter().enumerate() {
        let col = layer.expert_cols[slot];
        for (field, t) in expert.fields() {
            f(&format!("{prefix}.expert{col}.{field}"), t);
        }
    }
    for (t_id, router) in layer.routers.iter().enumerate() {
        f(&format!("{prefix}.router{t_id}.w_g"), &router.w_g);
        f(&format!("{prefix}.router{t_id}.w_noise"), &router.w_noise);
    }
}

fn visit_layer_mut(prefix: &str, layer: &mut MoELayerParams, f: &mut dyn FnMut(&str, &mut Tensor)) {
    for (slot, expert) in layer.experts.iter_mut().enumerate() {
        let col = layer.expert_cols[slot];
        for (field, t) in expert.fields_mut() {
            f(&format!("{prefix}.expert{col}.{field}"), t);
        }
    }
    for (t_id, router) in layer.routers.iter_mut().enumerate() {
        f(&format!("{prefix}.router{t_id}.w_g"), &mut router.w_g);
        f(&format!("{prefix}.router{t_id}.w_noise"), &mut router.w_noise);
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Eval,
    /// Routing noise active, drawn from substreams of the given seed.
    Train { noise_seed: u64 },
}

pub struct GraphParams {
    map: BTreeMap<String, TensorId>,
}

impl GraphParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in graph"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.map.iter()
    }
}

/// Gate tensors and dispatch instrumentation for one layer of one forward.
pub struct GateRecord {
    pub layer: usize,
    pub is_moe: bool,
    pub k: usize,
    pub n_cols: usize,
    pub gates: TensorId,
    pub probs: TensorId,
    /// Experts dispatched per token (= nonzero gates).
    pub per_token_eval_counts: Vec<usize>,
    /// Router columns that were actually evaluated.
    pub dispatched: Vec<usize>,
}

pub struct TaskForward {
    pub preds: TensorId,
    pub gate_records: Vec<GateRecord>,
}

/// Value-level gate log for one layer (eval-mode accounting).
#[derive(Debug, Clone)]
pub struct LayerGates {
    pub layer: usize,
    pub is_moe: bool,
    pub k: usize,
    pub n_cols: usize,
    pub gates: Vec<GateVector>,
    pub probs: Tensor,
    pub per_token_eval_counts: Vec<usize>,
    pub dispatched: Vec<usize>,
}

enum LayerIdSource<'a> {
    /// Look up ids in an already-inserted parameter map.
    Params { params: &'a GraphParams, prefix: &'a str },
    /// Insert layer tensors as constants (standalone layer evaluation).
    Standalone { task_embed_row: &'a [f64] },
}

#[allow(clippy::too_many_arguments)]
fn moe_layer_forward_graph(
    g: &mut Graph,
    layer: &MoELayerParams,
    source: &LayerIdSource,
    x: TensorId,
    task: usize,
    layer_idx: usize,
    seq_len: usize,
    renormalize: bool,
    mode: ForwardMode,
    forced_gates: Option<&Tensor>,
) -> Result<(TensorId, GateRecord), ModSquadError> {
    if task >= layer.routers.len() {
        return Err(ModSquadError::UnknownTask { task, n_tasks: layer.routers.len() });
    }
    let tokens = g.value(x).rows();
    let d_model = g.value(x).cols();
    let allowed = layer.allowed();

    let (wg, wn, embed_row) = match source {
        LayerIdSource::Params { params, prefix } => {
            let wg = params.id(&format!("{prefix}.router{task}.w_g"));
            let wn = params.id(&format!("{prefix}.router{task}.w_noise"));
            let table = params.id("task_embed");
            let row = g.row_gather(table, &[task]);
            (wg, wn, row)
        }
        LayerIdSource::Standalone { task_embed_row } => {
            let wg = g.constant(layer.routers[task].w_g.clone());
            let wn = g.constant(layer.routers[task].w_noise.clone());
            let row = g.constant(Tensor::new(vec![1, d_model], task_embed_row.to_vec()));
            (wg, wn, row)
        }
    };

    let (probs, gates) = if let Some(forced) = forced_gates {
        let id = g.constant(forced.clone());
        (id, id)
    } else {
        let noise = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train { noise_seed } => Some(routing::sample_noise(
                derive_seed(noise_seed, &[layer_idx as u64, task as u64]),
                tokens,
                layer.n_cols,
            )),
        };
        let out = routing::route_in_graph(
            g,
            x,
            wg,
            wn,
            layer.k,
            allowed.as_deref(),
            renormalize,
            noise.as_ref(),
        );
        (out.probs, out.gates)
    };

    let gate_vals = g.value(gates).clone();
    let n = layer.n_cols;
    let per_token_eval_counts: Vec<usize> = (0..tokens)
        .map(|t| gate_vals.row(t).iter().filter(|&&v| v > 0.0).count())
        .collect();

    // expert input: x shifted by the task embedding
    let xe = g.add_row(x, embed_row);

    let mut parts: Vec<TensorId> = Vec::new();
    let mut dispatched = Vec::new();
    for (slot, expert) in layer.experts.iter().enumerate() {
        let col = layer.expert_cols[slot];
        let selected_tokens: Vec<usize> =
            (0..tokens).filter(|&t| gate_vals.data[t * n + col] > 0.0).collect();
        if selected_tokens.is_empty() {
            continue;
        }
        dispatched.push(col);
        let rows: Vec<usize> = match layer.kind {
            LayerKind::Mlp => selected_tokens,
            LayerKind::Attn => {
                // attention needs whole sequences; unselected tokens in a
                // gathered sequence carry zero gate and contribute nothing
                let mut seqs: Vec<usize> = selected_tokens.iter().map(|&t| t / seq_len).collect();
                seqs.dedup();
                seqs.iter()
                    .flat_map(|&s| s * seq_len..(s + 1) * seq_len)
                    .collect()
            }
        };
        let gathered = g.row_gather(xe, &rows);
        let out = match (expert, source) {
            (ExpertParams::Mlp { w1, b1, w2, b2 }, src) => {
                let (w1id, b1id, w2id, b2id) = match src {
                    LayerIdSource::Params { params, prefix } => (
                        params.id(&format!("{prefix}.expert{col}.w1")),
                        params.id(&format!("{prefix}.expert{col}.b1")),
                        params.id(&format!("{prefix}.expert{col}.w2")),
                        params.id(&format!("{prefix}.expert{col}.b2")),
                    ),
                    LayerIdSource::Standalone { .. } => (
                        g.constant(w1.clone()),
                        g.constant(b1.clone()),
                        g.constant(w2.clone()),
                        g.constant(b2.clone()),
                    ),
                };
                let h1 = g.matmul(gathered, w1id);
                let h1b = g.add_row(h1, b1id);
                let act = g.gelu(h1b);
                let h2 = g.matmul(act, w2id);
                g.add_row(h2, b2id)
            }
            (ExpertParams::Attn { w_q, w_k, w_v, w_o }, src) => {
                let (wq, wk, wv, wo) = match src {
                    LayerIdSource::Params { params, prefix } => (
                        params.id(&format!("{prefix}.expert{col}.w_q")),
                        params.id(&format!("{prefix}.expert{col}.w_k")),
                        params.id(&format!("{prefix}.expert{col}.w_v")),
                        params.id(&format!("{prefix}.expert{col}.w_o")),
                    ),
                    LayerIdSource::Standalone { .. } => (
                        g.constant(w_q.clone()),
                        g.constant(w_k.clone()),
                        g.constant(w_v.clone()),
                        g.constant(w_o.clone()),
                    ),
                };
                let d_head = g.value(wq).cols();
                let q = g.matmul(gathered, wq);
                let k_ = g.matmul(gathered, wk);
                let v = g.matmul(gathered, wv);
                let scale = 1.0 / (d_head as f64).sqrt();
                let attn = g.attn_core(q, k_, v, seq_len, scale);
                g.matmul(attn, wo)
            }
        };
        let gate_col = g.col_gather(gates, col, &rows);
        let weighted = g.mul_col_broadcast(out, gate_col);
        parts.push(g.row_scatter_add(weighted, &rows, tokens));
    }

    let y = match parts.split_first() {
        None => g.constant(Tensor::zeros(vec![tokens, d_model])),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &p| g.add(acc, p)),
    };
    let record = GateRecord {
        layer: layer_idx,
        is_moe: layer.is_moe,
        k: layer.k.min(layer.expert_cols.len()),
        n_cols: n,
        gates,
        probs,
        per_token_eval_counts,
        dispatched,
    };
    Ok((y, record))
}

/// Standalone MoE layer evaluation: y = sum_k gate_k(x) * E_k(x + e_task).
/// `forced_gates` is a test hook overriding the router output.
pub fn moe_forward(
    layer: &MoELayerParams,
    x: &Tensor,
    task_embed_row: &[f64],
    task: usize,
    seq_len: usize,
    mode: ForwardMode,
    forced_gates: Option<&Tensor>,
) -> Result<(Tensor, Vec<GateVector>), ModSquadError> {
    let mut g = Graph::new();
    let xid = g.constant(x.clone());
    let (y, record) = moe_layer_forward_graph(
        &mut g,
        layer,
        &LayerIdSource::Standalone { task_embed_row },
        xid,
        task,
        0,
        seq_len,
        false,
        mode,
        forced_gates,
    )?;
    let gates = routing::gates_to_vectors(g.value(record.gates));
    Ok((g.value(y).clone(), gates))
}

/// Reference single-head attention used as an oracle and for spec-level
/// direct evaluation of one attention expert on one sequence.
pub fn attention_expert_forward(expert: &ExpertParams, x: &Tensor) -> Tensor {
    let (w_q, w_k, w_v, w_o) = match expert {
        ExpertParams::Attn { w_q, w_k, w_v, w_o } => (w_q, w_k, w_v, w_o),
        _ => panic!("attention_expert_forward: not an attention expert"),
    };
    let mut g = Graph::new();
    let xid = g.constant(x.clone());
    let wq = g.constant(w_q.clone());
    let wk = g.constant(w_k.clone());
    let wv = g.constant(w_v.clone());
    let wo = g.constant(w_o.clone());
    let q = g.matmul(xid, wq);
    let k = g.matmul(xid, wk);
    let v = g.matmul(xid, wv);
    let scale = 1.0 / (w_q.cols() as f64).sqrt();
    let a = g.attn_core(q, k, v, x.rows(), scale);
    let y = g.matmul(a, wo);
    g.value(y).clone()
}
