//! Per-task expert pruning: extract a standalone single-task sub-model by
//! removing rarely used experts.
//!
//! The sub-model keeps the task's routers at full width; removed experts'
//! entries are zeroed after the softmax, so on inputs whose realized
//! selections survive the gate values are bit-identical to the full model.

use serde::{Deserialize, Serialize};

use crate::config::GateStats;
use crate::data::{Split, SyntheticBenchmark};
use crate::error::ModSquadError;
use crate::mi::UsageAccumulator;
use crate::model::{BlockParams, LayerKind, ModSquadModel, MoELayerParams};
use crate::routing::TaskEmbeddingTable;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrunePolicy {
    /// Remove experts whose usage frequency is below theta
    /// (zero-usage experts always removed).
    Threshold(f64),
    /// Keep the ceil(h/100 * N) most-used experts per layer.
    TopShare(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: usize,
    /// Sorted surviving expert indices (router columns).
    pub kept: Vec<usize>,
    pub k_adjusted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunedModelSpec {
    pub task: usize,
    pub layers: Vec<LayerPrune>,
}

/// Usage frequencies for pruning: a dedicated deterministic eval pass.
pub fn usage_frequency(
    model: &ModSquadModel,
    bench: &SyntheticBenchmark,
    split: Split,
) -> Result<UsageAccumulator, ModSquadError> {
    let report = crate::train::evaluate(model, bench, split, GateStats::PostTopk)?;
    Ok(report.usage)
}

fn kept_for_layer(freq: &[f64], policy: PrunePolicy, k: usize) -> (Vec<usize>, usize) {
    let n = freq.len();
    let mut kept: Vec<usize> = match policy {
        PrunePolicy::Threshold(theta) => {
            (0..n).filter(|&i| freq[i] > 0.0 && freq[i] >= theta).collect()
        }
        PrunePolicy::TopShare(h) => {
            let keep_n = ((h / 100.0) * n as f64).ceil() as usize;
            let keep_n = keep_n.clamp(1, n);
            // sort by frequency descending, ties by lower index
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| freq[b].partial_cmp(&freq[a]).unwrap().then(a.cmp(&b)));
            let mut chosen: Vec<usize> = order[..keep_n].to_vec();
            chosen.sort_unstable();
            chosen
        }
    };
    if kept.is_empty() {
        // never produce an empty layer: the busiest expert survives
        let argmax = (0..n)
            .max_by(|&a, &b| freq[a].partial_cmp(&freq[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        kept = vec![argmax];
    }
    let k_adjusted = k.min(kept.len());
    (kept, k_adjusted)
}

/// Compute the per-layer kept sets for `task` from usage statistics.
pub fn prune_spec(
    model: &ModSquadModel,
    usage: &UsageAccumulator,
    task: usize,
    policy: PrunePolicy,
) -> Result<PrunedModelSpec, ModSquadError> {
    if task >= model.config.n_tasks {
        return Err(ModSquadError::UnknownTask { task, n_tasks: model.config.n_tasks });
    }
    if let PrunePolicy::Threshold(theta) = policy {
        if !(0.0..1.0).contains(&theta) {
            return Err(ModSquadError::Config(format!("theta {theta} not in [0, 1)")));
        }
    }
    if let PrunePolicy::TopShare(h) = policy {
        if !(h > 0.0 && h <= 100.0) {
            return Err(ModSquadError::Config(format!("top share {h}% not in (0, 100]")));
        }
    }
    let mut layers = Vec::new();
    for (pos, lu) in usage.layers.iter().enumerate() {
        let layer = model.layer(lu.layer);
        if !layer.is_moe {
            layers.push(LayerPrune { layer: lu.layer, kept: (0..layer.n_cols).collect(), k_adjusted: layer.k });
            continue;
        }
        let cond = usage.conditional(pos)?;
        let freq = cond.row(task);
        let (kept, k_adjusted) = kept_for_layer(freq, policy, layer.k);
        layers.push(LayerPrune { layer: lu.layer, kept, k_adjusted });
    }
    Ok(PrunedModelSpec { task, layers })
}

/// Materialize the standalone single-task model described by `spec`.
/// The new model has n_tasks = 1 (task id 0 maps to the original task).
pub fn build_pruned_model(model: &ModSquadModel, spec: &PrunedModelSpec) -> ModSquadModel {
    let task = spec.task;
    let mut config = model.config.clone();
    config.n_tasks = 1;
    config.head_dims = vec![model.config.head_dims[task]];

    let prune_layer = |layer: &MoELayerParams, lp: &LayerPrune| -> MoELayerParams {
        let mut experts = Vec::with_capacity(lp.kept.len());
        let mut expert_cols = Vec::with_capacity(lp.kept.len());
        for &col in &lp.kept {
            let slot = layer
                .expert_cols
                .iter()
                .position(|&c| c == col)
                .expect("kept expert not present in source layer");
            experts.push(layer.experts[slot].clone());
            expert_cols.push(col);
        }
        MoELayerParams {
            kind: layer.kind,
            experts,
            expert_cols,
            n_cols: layer.n_cols,
            routers: vec![layer.routers[task].clone()],
            k: lp.k_adjusted,
            is_moe: layer.is_moe,
        }
    };

    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| BlockParams {
            ln1_g: block.ln1_g.clone(),
            ln1_b: block.ln1_b.clone(),
            attn: prune_layer(&block.attn, &spec.layers[ModSquadModel::layer_index(b, LayerKind::Attn)]),
            ln2_g: block.ln2_g.clone(),
            ln2_b: block.ln2_b.clone(),
            mlp: prune_layer(&block.mlp, &spec.layers[ModSquadModel::layer_index(b, LayerKind::Mlp)]),
        })
        .collect();

    let d = model.config.d_model;
    let embed_row = model.task_embed.embeddings.row(task).to_vec();
    ModSquadModel {
        config,
        in_w: model.in_w.clone(),
        in_b: model.in_b.clone(),
        pos_embed: model.pos_embed.clone(),
        blocks,
        final_ln_g: model.final_ln_g.clone(),
        final_ln_b: model.final_ln_b.clone(),
        task_embed: TaskEmbeddingTable { embeddings: Tensor::new(vec![1, d], embed_row) },
        heads: vec![model.heads[task].clone()],
        log_var: Tensor::new(vec![1, 1], vec![model.log_var.data[task]]),
        frozen: Default::default(),
    }
}

pub fn prune_threshold(
    model: &ModSquadModel,
    usage: &UsageAccumulator,
    task: usize,
    theta: f64,
) -> Result<(PrunedModelSpec, ModSquadModel), ModSquadError> {
    let spec = prune_spec(model, usage, task, PrunePolicy::Threshold(theta))?;
    let pruned = build_pruned_model(model, &spec);
    Ok((spec, pruned))
}

pub fn prune_top_share(
    model: &ModSquadModel,
    usage: &UsageAccumulator,
    task: usize,
    h_percent: f64,
) -> Result<(PrunedModelSpec, ModSquadModel), ModSquadError> {
    let spec = prune_spec(model, usage, task, PrunePolicy::TopShare(h_percent))?;
    let pruned = build_pruned_model(model, &spec);
    Ok((spec, pruned))
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub task: usize,
    pub max_abs_output_diff: f64,
    pub metric_full: f64,
    pub metric_pruned: f64,
    pub accuracy_full: Option<f64>,
    pub accuracy_pruned: Option<f64>,
    pub param_count_full: usize,
    pub param_count_pruned: usize,
}

/// Per-model metric accumulator over one task's dataset chunks.
#[derive(Default)]
struct MetricAcc {
    sq_err: f64,
    elems: usize,
    ce: f64,
    correct: usize,
    labels: usize,
}

impl MetricAcc {
    fn add(&mut self, preds: &Tensor, target: &crate::data::Target) {
        match target {
            crate::data::Target::Regression(t) => {
                for (a, b) in preds.data.iter().zip(&t.data) {
                    self.sq_err += (a - b) * (a - b);
                }
                self.elems += t.numel();
            }
            crate::data::Target::Classification(labels) => {
                let c = preds.cols();
                for (i, &label) in labels.iter().enumerate() {
                    let row = preds.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    self.ce += lse - row[label];
                    let argmax =
                        (0..c).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                    if argmax == label {
                        self.correct += 1;
                    }
                }
                self.labels += labels.len();
            }
        }
    }

    fn finish(&self) -> (f64, Option<f64>) {
        if self.elems > 0 {
            (self.sq_err / self.elems as f64, None)
        } else {
            (self.ce / self.labels as f64, Some(self.correct as f64 / self.labels as f64))
        }
    }
}

/// Eval-mode comparison of the full model against a pruned sub-model on the
/// given split (the pruning statistics dataset by default). Both models are
/// scored on the ORIGINAL task's dataset; the pruned model addresses it as
/// its task 0.
pub fn verify_equivalence(
    full: &ModSquadModel,
    pruned: &ModSquadModel,
    task: usize,
    bench: &SyntheticBenchmark,
    split: Split,
) -> Result<EquivalenceReport, ModSquadError> {
    let count = match split {
        Split::Train => bench.section.train_per_task,
        Split::Test => bench.section.test_per_task,
    };
    if count == 0 {
        return Err(ModSquadError::EmptyDataset);
    }
    let mut max_diff: f64 = 0.0;
    let mut acc_full = MetricAcc::default();
    let mut acc_pruned = MetricAcc::default();
    let chunk = 100usize;
    let mut offset = 0;
    while offset < count {
        let take = chunk.min(count - offset);
        let ds = bench.generate_range(task, split, offset, take);
        let (a, _) = full.model_forward(&ds.x, task)?;
        let (b, _) = pruned.model_forward(&ds.x, 0)?;
        for (x, y) in a.data.iter().zip(&b.data) {
            max_diff = max_diff.max((x - y).abs());
        }
        acc_full.add(&a, &ds.target);
        acc_pruned.add(&b, &ds.target);
        offset += take;
    }
    let (metric_full, accuracy_full) = acc_full.finish();
    let (metric_pruned, accuracy_pruned) = acc_pruned.finish();
    Ok(EquivalenceReport {
        task,
        max_abs_output_diff: max_diff,
        metric_full,
        metric_pruned,
        accuracy_full,
        accuracy_pruned,
        param_count_full: full.param_count(),
        param_count_pruned: pruned.param_count(),
    })
}
