//! Run configuration: JSON file with dotted-path overrides.

use serde::{Deserialize, Serialize};

use crate::data::DataSection;
use crate::error::ModSquadError;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub blocks: usize,
    /// MoE layers replace dense layers on every `moe_every`-th block.
    pub moe_every: usize,
    pub n_experts_attn: usize,
    pub k_attn: usize,
    pub n_experts_mlp: usize,
    pub k_mlp: usize,
    pub base_hidden: usize,
    pub base_head_dim: usize,
    /// Divide expert hidden/head dims by K so FLOPs match a dense layer.
    pub flops_matched: bool,
    /// Renormalize surviving gate weights to sum 1 (ablation; default keeps
    /// raw softmax mass of the selected subset).
    pub renormalize_gates: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            blocks: 4,
            moe_every: 1,
            n_experts_attn: 8,
            k_attn: 4,
            n_experts_mlp: 8,
            k_mlp: 2,
            base_hidden: 256,
            base_head_dim: 64,
            flops_matched: true,
            renormalize_gates: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Samples per task in each optimization step's mixed batch.
    pub batch_per_task: usize,
    /// Removal threshold for expert pruning.
    pub theta: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            base_lr: 2e-4,
            weight_decay: 0.05,
            batch_per_task: 16,
            theta: 0.01,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStats {
    /// Usage statistics from post-TopK gate weights (the mass the model emits).
    PostTopk,
    /// Usage statistics from pre-TopK softmax weights.
    PreTopk,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on the per-layer task/expert mutual-information term.
    pub w_mi: f64,
    /// Weight on the cross-task load-balancing term (the modified-MoE
    /// comparison objective; 0 disables it).
    pub w_balance: f64,
    pub gate_stats: GateStats,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { w_mi: 0.001, w_balance: 0.0, gate_stats: GateStats::PostTopk }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults: small enough to train on one CPU core in minutes
    /// while still exhibiting specialization across task groups.
    pub fn desk_default() -> Self {
        let mut c = RunConfig::default();
        c.train.epochs = 10;
        c.train.warmup_epochs = 1;
        c.train.base_lr = 1e-3;
        c
    }

    /// Tiny 2-task / 2-expert / 1-block configuration for gradient checking.
    pub fn grad_check_default() -> Self {
        let mut c = RunConfig::default();
        c.model.d_model = 8;
        c.model.blocks = 1;
        c.model.n_experts_attn = 2;
        c.model.k_attn = 2;
        c.model.n_experts_mlp = 2;
        c.model.k_mlp = 1;
        c.model.base_hidden = 8;
        c.model.base_head_dim = 8;
        c.data.n_groups = 1;
        c.data.tasks_per_group = 2;
        c.data.d_in = 4;
        c.data.seq_len = 2;
        c.data.d_latent = 3;
        c.train.batch_per_task = 3;
        c
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModSquadError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModSquadError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ModSquadError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModSquadError> {
        let err = |path: &str, msg: String| Err(ModSquadError::Config(format!("{path}: {msg}")));
        let m = &self.model;
        if m.d_model == 0 || m.blocks == 0 {
            return err("model", "d_model and blocks must be positive".into());
        }
        if m.moe_every == 0 {
            return err("model.moe_every", "must be >= 1".into());
        }
        if m.k_attn < 1 || m.k_attn > m.n_experts_attn {
            return err("model.k_attn", format!("k={} out of range 1..={}", m.k_attn, m.n_experts_attn));
        }
        if m.k_mlp < 1 || m.k_mlp > m.n_experts_mlp {
            return err("model.k_mlp", format!("k={} out of range 1..={}", m.k_mlp, m.n_experts_mlp));
        }
        if m.flops_matched && (m.base_hidden % m.k_mlp != 0 || m.base_head_dim % m.k_attn != 0) {
            return err(
                "model",
                format!(
                    "flops_matched requires base_hidden ({}) divisible by k_mlp ({}) and base_head_dim ({}) by k_attn ({})",
                    m.base_hidden, m.k_mlp, m.base_head_dim, m.k_attn
                ),
            );
        }
        let t = &self.train;
        if t.warmup_epochs >= t.epochs {
            return err("train.warmup_epochs", format!("{} must be < epochs ({})", t.warmup_epochs, t.epochs));
        }
        if t.base_lr <= 0.0 || t.batch_per_task == 0 {
            return err("train", "base_lr and batch_per_task must be positive".into());
        }
        if !(0.0..1.0).contains(&t.theta) {
            return err("train.theta", format!("{} not in [0, 1)", t.theta));
        }
        let d = &self.data;
        if d.n_groups == 0 || d.tasks_per_group == 0 {
            return err("data", "n_groups and tasks_per_group must be positive".into());
        }
        if d.d_in == 0 || d.seq_len == 0 || d.d_latent == 0 {
            return err("data", "d_in, seq_len, d_latent must be positive".into());
        }
        if d.train_per_task == 0 || d.test_per_task == 0 {
            return err("data", "train_per_task and test_per_task must be positive".into());
        }
        if self.loss.w_mi < 0.0 {
            return err("loss.w_mi", "must be >= 0".into());
        }
        Ok(())
    }

    /// Apply a dotted-path override like `train.epochs=5`.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ModSquadError> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| ModSquadError::Config(format!("override '{kv}' must be key=value")))?;
        let mut json = serde_json::to_value(&*self)?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split produces at least one part");
        let pointer: String = parents.iter().map(|p| format!("/{p}")).collect();
        let parent = if pointer.is_empty() {
            &mut json
        } else {
            json.pointer_mut(&pointer)
                .ok_or_else(|| ModSquadError::Config(format!("unknown config key '{key}'")))?
        };
        let obj = parent
            .as_object_mut()
            .ok_or_else(|| ModSquadError::Config(format!("{key}: '{pointer}' is not an object")))?;
        let existing = obj
            .get(*last)
            .ok_or_else(|| ModSquadError::Config(format!("unknown config key '{key}'")))?;
        let parsed: serde_json::Value = if existing.is_string() {
            serde_json::Value::String(value.to_string())
        } else {
            serde_json::from_str(value)
                .map_err(|e| ModSquadError::Config(format!("{key}: bad value '{value}': {e}")))?
        };
        obj.insert(last.to_string(), parsed);
        *self = serde_json::from_value(json)
            .map_err(|e| ModSquadError::Config(format!("{key}: {e}")))?;
        self.validate()
    }

    /// Resolve the architecture against the benchmark's task list.
    pub fn model_config(&self, bench: &crate::data::SyntheticBenchmark) -> ModelConfig {
        ModelConfig {
            d_in: self.data.d_in,
            seq_len: self.data.seq_len,
            d_model: self.model.d_model,
            blocks: self.model.blocks,
            moe_every: self.model.moe_every,
            n_experts_attn: self.model.n_experts_attn,
            k_attn: self.model.k_attn,
            n_experts_mlp: self.model.n_experts_mlp,
            k_mlp: self.model.k_mlp,
            base_hidden: self.model.base_hidden,
            base_head_dim: self.model.base_head_dim,
            flops_matched: self.model.flops_matched,
            renormalize_gates: self.model.renormalize_gates,
            n_tasks: bench.n_tasks(),
            head_dims: bench.head_dims(),
            ln_eps: 1e-5,
        }
    }
}
