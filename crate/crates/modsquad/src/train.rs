//! Multi-task training: mixed-batch sampling, the full step loss (uncertainty
//! weighted task losses, MI term, optional load-balancing term), the training
//! loop, evaluation, and router fine-tuning for new tasks.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GateStats, LossConfig, RunConfig, TrainConfig};
use crate::data::{derive_seed, Split, SyntheticBenchmark, Target, TaskKind};
use crate::error::ModSquadError;
use crate::mi;
use crate::model::{ForwardMode, HeadParams, ModSquadModel};
use crate::optim::{clip_global_norm, decays, lr_at, AdamW};
use crate::routing::RouterParams;
use crate::tensor::{Graph, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub task: usize,
    /// [B*seq_len x d_in]
    pub x: Tensor,
    pub target: Target,
}

/// One optimization step's batch: an equal number of samples per task so the
/// batch-local MI is well defined.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub tasks: Vec<TaskBatch>,
}

pub fn steps_per_epoch(train_per_task: usize, batch_per_task: usize) -> u64 {
    (train_per_task / batch_per_task).max(1) as u64
}

fn epoch_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

impl MixedBatch {
    /// Deterministic batch for a global `step`: each epoch reshuffles every
    /// task's sample order, steps walk the permutation without replacement.
    pub fn sample(bench: &SyntheticBenchmark, train: &TrainConfig, seed: u64, step: u64) -> Self {
        Self::sample_tasks(bench, train, seed, step, &(0..bench.n_tasks()).collect::<Vec<_>>())
    }

    pub fn sample_tasks(
        bench: &SyntheticBenchmark,
        train: &TrainConfig,
        seed: u64,
        step: u64,
        tasks: &[usize],
    ) -> Self {
        let n = bench.section.train_per_task;
        let b = train.batch_per_task.min(n);
        let spe = steps_per_epoch(n, train.batch_per_task);
        let epoch = step / spe;
        let start = (step % spe) as usize * b;
        let batches = tasks
            .iter()
            .map(|&task| {
                let perm = epoch_permutation(n, derive_seed(seed, &[4, task as u64, epoch]));
                let chosen = &perm[start..start + b];
                let mut x = Vec::new();
                let mut reg: Vec<f64> = Vec::new();
                let mut labels: Vec<usize> = Vec::new();
                let mut reg_dim = 0;
                for &idx in chosen {
                    let one = bench.generate_range(task, Split::Train, idx, 1);
                    x.extend_from_slice(&one.x.data);
                    match one.target {
                        Target::Regression(t) => {
                            reg_dim = t.cols();
                            reg.extend_from_slice(&t.data);
                        }
                        Target::Classification(l) => labels.extend_from_slice(&l),
                    }
                }
                let target = match bench.tasks[task].kind {
                    TaskKind::Regression => {
                        Target::Regression(Tensor::new(vec![b, reg_dim], reg))
                    }
                    TaskKind::Classification => Target::Classification(labels),
                };
                TaskBatch {
                    task,
                    x: Tensor::new(vec![b * bench.section.seq_len, bench.section.d_in], x),
                    target,
                }
            })
            .collect();
        MixedBatch { tasks: batches }
    }
}

/// Scalar components of one step's total loss.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Raw per-task losses (before uncertainty weighting), batch task order.
    pub task_losses: Vec<f64>,
    /// (layer index, I(T;E)) per MoE layer from batch-local statistics.
    pub mi_per_layer: Vec<(usize, f64)>,
    /// (layer index, CV^2 of expert importance) when the balance term is on.
    pub balance_per_layer: Vec<(usize, f64)>,
    /// (layer index, P(E|T)) batch conditionals per MoE layer.
    pub usage_conds: Vec<(usize, Tensor)>,
}

fn task_loss_in_graph(g: &mut Graph, preds: TensorId, target: &Target) -> TensorId {
    match target {
        Target::Regression(t) => {
            let mut neg = t.clone();
            for v in &mut neg.data {
                *v = -*v;
            }
            let negid = g.constant(neg);
            let diff = g.add(preds, negid);
            let sq = g.mul(diff, diff);
            g.mean_all(sq)
        }
        Target::Classification(labels) => g.softmax_cross_entropy(preds, labels),
    }
}

/// Build and evaluate the full step loss:
///   sum_i [exp(-s_i) L_i + s_i]  -  w_mi * sum_layers I(T;E)
///   + w_balance * sum_layers sum_tasks CV^2(per-task expert importance)
/// With `noise_seed` set the routers run in train mode with that noise draw;
/// `want_grads` additionally runs backward and returns per-parameter grads.
pub fn step_loss(
    model: &ModSquadModel,
    batch: &MixedBatch,
    loss_cfg: &LossConfig,
    noise_seed: Option<u64>,
    want_grads: bool,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f64>>), ModSquadError> {
    if batch.tasks.is_empty() {
        return Err(ModSquadError::EmptyDataset);
    }
    let mode = match noise_seed {
        Some(s) => ForwardMode::Train { noise_seed: s },
        None => ForwardMode::Eval,
    };
    let mut g = Graph::new();
    let params = model.insert_params(&mut g);

    let mut task_losses = Vec::new();
    let mut weighted_terms: Vec<TensorId> = Vec::new();
    // gate tensor per (moe layer, batch task)
    let mut layer_gates: BTreeMap<usize, Vec<TensorId>> = BTreeMap::new();

    for tb in &batch.tasks {
        let fwd = model.forward_task(&mut g, &params, &tb.x, tb.task, mode)?;
        let raw = task_loss_in_graph(&mut g, fwd.preds, &tb.target);
        task_losses.push(g.value(raw).data[0]);
        let s = g.row_gather(params.id("log_var"), &[tb.task]);
        let neg_s = g.scale(s, -1.0);
        let w = g.exp(neg_s);
        let wl = g.mul(w, raw);
        weighted_terms.push(g.add(wl, s));
        for record in &fwd.gate_records {
            if !record.is_moe {
                continue;
            }
            let stat = match loss_cfg.gate_stats {
                GateStats::PostTopk => record.gates,
                GateStats::PreTopk => record.probs,
            };
            layer_gates.entry(record.layer).or_default().push(stat);
        }
    }

    let mut total = weighted_terms[0];
    for &t in &weighted_terms[1..] {
        total = g.add(total, t);
    }

    let mut mi_per_layer = Vec::new();
    let mut balance_per_layer = Vec::new();
    let mut usage_conds = Vec::new();
    for (&layer, gates) in &layer_gates {
        // batch conditionals and the MI value, independent of loss weights
        let n = g.value(gates[0]).cols();
        let mut mass = Tensor::zeros(vec![gates.len(), n]);
        for (t, &gid) in gates.iter().enumerate() {
            let gv = g.value(gid);
            for chunk in gv.data.chunks(n) {
                for (j, &x) in chunk.iter().enumerate() {
                    mass.data[t * n + j] += x;
                }
            }
        }
        let conds = mi::conditional_from_mass(&mass, layer)?;
        let mi_val = mi::mutual_information(&mi::joint_from_conditional(&conds));
        mi_per_layer.push((layer, mi_val));
        usage_conds.push((layer, conds));

        if loss_cfg.w_mi != 0.0 {
            let mi_id = mi::mi_layer_in_graph(&mut g, gates, layer)?;
            let term = g.scale(mi_id, -loss_cfg.w_mi);
            total = g.add(total, term);
        }
        if loss_cfg.w_balance != 0.0 {
            // Balance each task batch separately: every task is pushed to
            // spread its importance evenly over the experts, the behaviour of
            // a standard MoE balance loss without task-aware routing.
            let mut layer_cv = 0.0;
            for &gid in gates {
                let importance = g.sum_axis0(gid);
                let cv = g.cv_squared(importance);
                layer_cv += g.value(cv).data[0];
                let term = g.scale(cv, loss_cfg.w_balance);
                total = g.add(total, term);
            }
            balance_per_layer.push((layer, layer_cv));
        }
    }

    let breakdown = LossBreakdown {
        total: g.value(total).data[0],
        task_losses,
        mi_per_layer,
        balance_per_layer,
        usage_conds,
    };

    let mut grads = BTreeMap::new();
    if want_grads {
        g.backward(total)?;
        for (name, &id) in params.iter() {
            if let Some(gr) = g.grad(id) {
                grads.insert(name.clone(), gr.to_vec());
            }
        }
    }
    Ok((breakdown, grads))
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ModSquadModel,
    pub bench: SyntheticBenchmark,
    pub loss_history: Vec<f64>,
    pub ema: mi::UsageEma,
}

/// Full multi-task training run. `log` receives one JSON line per step.
pub fn train(
    config: &RunConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult, ModSquadError> {
    config.validate()?;
    let bench = SyntheticBenchmark::with_seed(&config.data, config.seed);
    let mut model = ModSquadModel::new(&config.model_config(&bench));
    model.init(config.seed);

    let spe = steps_per_epoch(config.data.train_per_task, config.train.batch_per_task);
    let total_steps = config.train.epochs as u64 * spe;
    let warmup_steps = config.train.warmup_epochs as u64 * spe;
    let mut opt = AdamW::new(config.train.weight_decay);
    let mut ema = mi::UsageEma::new(0.99);
    let mut loss_history = Vec::with_capacity(total_steps as usize);

    for step in 0..total_steps {
        let batch = MixedBatch::sample(&bench, &config.train, config.seed, step);
        let noise_seed = derive_seed(config.seed, &[5, step]);
        let (lb, mut grads) = step_loss(&model, &batch, &config.loss, Some(noise_seed), true)?;
        if !lb.total.is_finite() {
            let param = grads
                .iter()
                .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
                .map(|(k, _)| k.clone())
                .unwrap_or_else(|| "total_loss".to_string());
            return Err(ModSquadError::NanLoss { step: step as usize, param });
        }
        clip_global_norm(&mut grads, config.train.grad_clip);
        let lr = lr_at(step, warmup_steps, total_steps, config.train.base_lr);
        opt.begin_step();
        for name in model.param_names() {
            if model.frozen.contains(&name) {
                continue;
            }
            if let Some(grad) = grads.get(&name) {
                let decay = decays(&name);
                opt.update(&name, &mut model.param_mut(&name).data, grad, lr, decay);
            }
        }
        ema.update(&lb.usage_conds.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
        loss_history.push(lb.total);
        if let Some(w) = log.as_deref_mut() {
            let record = serde_json::json!({
                "step": step,
                "lr": lr,
                "total": lb.total,
                "task_losses": lb.task_losses,
                "mi_per_layer": lb.mi_per_layer.iter().map(|(_, v)| *v).collect::<Vec<_>>(),
            });
            writeln!(w, "{record}")?;
        }
    }

    Ok(TrainResult { model, bench, loss_history, ema })
}

#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task: usize,
    /// MSE for regression tasks, mean cross-entropy for classification.
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
    pub usage: mi::UsageAccumulator,
}

/// Deterministic eval-mode pass over one split: per-task metric plus the
/// usage statistics that feed pruning and analysis.
pub fn evaluate(
    model: &ModSquadModel,
    bench: &SyntheticBenchmark,
    split: Split,
    gate_stats: GateStats,
) -> Result<EvalReport, ModSquadError> {
    evaluate_tasks(model, bench, split, gate_stats, &(0..model.config.n_tasks).collect::<Vec<_>>())
}

pub fn evaluate_tasks(
    model: &ModSquadModel,
    bench: &SyntheticBenchmark,
    split: Split,
    gate_stats: GateStats,
    tasks: &[usize],
) -> Result<EvalReport, ModSquadError> {
    let mut usage = mi::UsageAccumulator::for_model(model, gate_stats);
    let mut per_task = Vec::new();
    let count = match split {
        Split::Train => bench.section.train_per_task,
        Split::Test => bench.section.test_per_task,
    };
    if count == 0 {
        return Err(ModSquadError::EmptyDataset);
    }
    let chunk = 100usize;
    for &task in tasks {
        let mut sq_err = 0.0;
        let mut elems = 0usize;
        let mut ce = 0.0;
        let mut correct = 0usize;
        let mut labels_seen = 0usize;
        let mut offset = 0;
        while offset < count {
            let take = chunk.min(count - offset);
            let ds = bench.generate_range(task, split, offset, take);
            let (preds, gate_log) = model.model_forward(&ds.x, task)?;
            usage.add(task, &gate_log);
            match &ds.target {
                Target::Regression(t) => {
                    for (a, b) in preds.data.iter().zip(&t.data) {
                        sq_err += (a - b) * (a - b);
                    }
                    elems += t.numel();
                }
                Target::Classification(labels) => {
                    let c = preds.cols();
                    for (i, &label) in labels.iter().enumerate() {
                        let row = preds.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        ce += lse - row[label];
                        let argmax = (0..c)
                            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                            .unwrap();
                        if argmax == label {
                            correct += 1;
                        }
                    }
                    labels_seen += labels.len();
                }
            }
            offset += take;
        }
        let (loss, accuracy) = match bench.tasks[task].kind {
            TaskKind::Regression => (sq_err / elems as f64, None),
            TaskKind::Classification => (
                ce / labels_seen as f64,
                Some(correct as f64 / labels_seen as f64),
            ),
        };
        per_task.push(TaskEval { task, loss, accuracy });
    }
    Ok(EvalReport { per_task, usage })
}

/// Per-task and mean relative improvement:
/// delta_i = (-1)^{lower_better_i} (m_i - b_i) / b_i.
pub fn delta_t(
    metrics_model: &[f64],
    metrics_baseline: &[f64],
    lower_better: &[bool],
) -> Result<(Vec<f64>, f64), ModSquadError> {
    assert_eq!(metrics_model.len(), metrics_baseline.len());
    assert_eq!(metrics_model.len(), lower_better.len());
    let mut per_task = Vec::new();
    for (task, ((&m, &b), &lower)) in metrics_model
        .iter()
        .zip(metrics_baseline)
        .zip(lower_better)
        .enumerate()
    {
        if b == 0.0 {
            return Err(ModSquadError::ZeroBaselineMetric { task });
        }
        let d = (m - b) / b;
        per_task.push(if lower { -d } else { d });
    }
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok((per_task, mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Train the new task's routers, embedding row, and head.
    RouterAndHead,
    /// Train the new head only (comparison baseline).
    HeadOnly,
}

/// Grow the model for one new task: fresh routers in every layer, a task
/// embedding row, a head, and a log-variance slot. Initialization depends
/// only on `init_seed` so competing fine-tune modes start identically.
pub fn extend_for_task(model: &mut ModSquadModel, head_dim: usize, init_seed: u64) -> usize {
    let new_task = model.config.n_tasks;
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(init_seed, &[8]));
    let mut draw = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| crate::routing::randn(&mut rng) * 0.02).collect())
    };
    for i in 0..model.n_layers() {
        let n_cols = model.layer(i).n_cols;
        let router = RouterParams { w_g: draw(vec![d, n_cols]), w_noise: draw(vec![d, n_cols]) };
        model.layer_mut(i).routers.push(router);
    }
    let embed_row = draw(vec![1, d]);
    let te = &mut model.task_embed.embeddings;
    te.data.extend_from_slice(&embed_row.data);
    te.shape[0] += 1;
    model.heads.push(HeadParams { w: draw(vec![d, head_dim]), b: Tensor::zeros(vec![1, head_dim]) });
    model.log_var.data.push(0.0);
    model.log_var.shape[0] += 1;
    model.config.n_tasks += 1;
    model.config.head_dims.push(head_dim);
    new_task
}

/// Names trainable during fine-tuning of `task` in the given mode.
pub fn finetune_trainable(model: &ModSquadModel, task: usize, mode: FinetuneMode) -> Vec<String> {
    let router_tag = format!(".router{task}.");
    model
        .param_names()
        .into_iter()
        .filter(|n| match mode {
            FinetuneMode::RouterAndHead => {
                n.contains(&router_tag)
                    || n == "task_embed"
                    || n.starts_with(&format!("head{task}."))
            }
            FinetuneMode::HeadOnly => n.starts_with(&format!("head{task}.")),
        })
        .collect()
}

/// Count of genuinely trainable scalars: routers + one embedding row + head.
/// (The embedding table is one tensor, but only the new row receives
/// gradient, so it is counted as d_model values.)
pub fn finetune_trainable_count(model: &ModSquadModel, task: usize, mode: FinetuneMode) -> usize {
    finetune_trainable(model, task, mode)
        .iter()
        .map(|n| {
            if n == "task_embed" {
                model.config.d_model
            } else {
                model.param(n).numel()
            }
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub train_losses: Vec<f64>,
    pub test_loss: f64,
}

/// Fine-tune for a new task on its own data, all other parameters frozen.
pub fn finetune_new_task(
    model: &mut ModSquadModel,
    bench: &SyntheticBenchmark,
    task: usize,
    mode: FinetuneMode,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneResult, ModSquadError> {
    if bench.section.train_per_task == 0 {
        return Err(ModSquadError::EmptyDataset);
    }
    let trainable: std::collections::BTreeSet<String> =
        finetune_trainable(model, task, mode).into_iter().collect();
    let saved_frozen = model.frozen.clone();
    model.frozen = model
        .param_names()
        .into_iter()
        .filter(|n| !trainable.contains(n))
        .collect();

    let loss_cfg = LossConfig { w_mi: 0.0, w_balance: 0.0, gate_stats: GateStats::PostTopk };
    let spe = steps_per_epoch(bench.section.train_per_task, train_cfg.batch_per_task);
    let total_steps = train_cfg.epochs as u64 * spe;
    let warmup = (total_steps / 10).max(1);
    let mut opt = AdamW::new(train_cfg.weight_decay);
    let mut train_losses = Vec::new();

    for step in 0..total_steps {
        let batch = MixedBatch::sample_tasks(bench, train_cfg, seed, step, &[task]);
        let noise_seed = derive_seed(seed, &[7, step]);
        let (lb, mut grads) = step_loss(model, &batch, &loss_cfg, Some(noise_seed), true)?;
        if !lb.total.is_finite() {
            return Err(ModSquadError::NanLoss {
                step: step as usize,
                param: "total_loss".to_string(),
            });
        }
        clip_global_norm(&mut grads, train_cfg.grad_clip);
        let lr = lr_at(step, warmup, total_steps.max(warmup + 1), train_cfg.base_lr);
        opt.begin_step();
        for name in &trainable {
            if let Some(grad) = grads.get(name) {
                opt.update(name, &mut model.param_mut(name).data, grad, lr, decays(name));
            }
        }
        train_losses.push(lb.total);
    }
    model.frozen = saved_frozen;

    let report = evaluate_tasks(model, bench, Split::Test, GateStats::PostTopk, &[task])?;
    Ok(FinetuneResult { train_losses, test_loss: report.per_task[0].loss })
}
